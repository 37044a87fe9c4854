"""Acceptance gate: one test per primary criterion.

Each test prints a single ``[criterion N] PASS/FAIL`` line (run with ``-s`` to
see them live). Criterion 8 is the full end-to-end simulation and dominates
the runtime of this file; everything else finishes in seconds.
"""

import itertools
import math
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
from fastapi.testclient import TestClient

from aloop import segbackend, strategies
from aloop.config import parse_run_config
from aloop.controller import ADMITTED, CycleController, build_app
from aloop.datamgr import (
    IGNORE,
    AnnotationRecord,
    BoundaryLine,
    record_to_json,
    render_mask,
)
from aloop.experiment import run_experiment
from aloop.protocol import ProtocolError, SessionEngine, parse_protocol
from aloop.simlab import (
    SyntheticSpec,
    generate_synthetic,
    ground_truth_mask,
    oracle_annotate,
)

from conftest import make_cfg
from test_protocol import _mutations


@contextmanager
def criterion(n):
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        print(f"\n[criterion {n}] FAIL {type(exc).__name__}: {exc}")
        raise
    print(f"\n[criterion {n}] PASS {info['detail']}".rstrip())


# --- 1: scorer oracle equivalence --------------------------------------------------


def test_criterion_01_scorer_oracle_equivalence():
    with criterion(1) as info:
        rng = np.random.default_rng(20260814)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(1000):
            k = int(rng.integers(2, 6))
            h, w = (int(v) for v in rng.integers(1, 9, size=2))
            p = rng.dirichlet(np.ones(k), size=(h, w))

            conf = mar = ent = 0.0  # direct per-pixel formulas, no shared code
            for i in range(h):
                for j in range(w):
                    probs = sorted(p[i, j], reverse=True)
                    conf += 1.0 - probs[0]
                    mar += 1.0 - (probs[0] - probs[1])
                    ent += -sum(q * math.log(q) for q in probs if q > 0)
            n = h * w
            for method, want in (("CONF", conf / n), ("MAR", mar / n), ("ENT", ent / n)):
                worst = max(worst, abs(strategies.score_uncertainty(p, method) - want))

            reps = [rng.dirichlet(np.ones(k), size=(h, w))
                    for _ in range(int(rng.integers(2, 5)))]
            mean_p = sum(reps) / len(reps)
            want = sum(-sum(q * math.log(q) for q in mean_p[i, j] if q > 0)
                       for i in range(h) for j in range(w)) / n
            worst = max(worst, abs(strategies.score_mc_entropy(reps) - want))
        elapsed = time.perf_counter() - t0
        assert worst < 1e-9
        assert elapsed < 10.0
        info["detail"] = f"max |err| {worst:.1e} over 1000 posteriors in {elapsed:.1f}s"


# --- 2: analytic anchors ------------------------------------------------------------


def test_criterion_02_analytic_anchors():
    with criterion(2) as info:
        for k in range(2, 6):
            uniform = np.full((3, 4, k), 1.0 / k)
            one_hot = np.zeros((3, 4, k))
            one_hot[..., 0] = 1.0
            assert abs(strategies.score_uncertainty(uniform, "ENT") - math.log(k)) < 1e-12
            assert abs(strategies.score_uncertainty(uniform, "MAR") - 1.0) < 1e-12
            assert abs(strategies.score_uncertainty(one_hot, "ENT")) < 1e-12
            assert abs(strategies.score_uncertainty(one_hot, "CONF")) < 1e-12

        rng = np.random.default_rng(2)
        for _ in range(200):
            k = int(rng.integers(2, 6))
            h, w = (int(v) for v in rng.integers(1, 9, size=2))
            reps = [rng.dirichlet(np.ones(k), size=(h, w))
                    for _ in range(int(rng.integers(2, 6)))]
            mcdr = strategies.score_mc_entropy(reps)
            mean_ent = float(np.mean([strategies.score_uncertainty(r, "ENT") for r in reps]))
            assert mcdr >= mean_ent - 1e-12
            region = int(rng.integers(1, 5))
            assert strategies.score_regional_mc(reps, region) >= mcdr - 1e-12
        info["detail"] = "anchors exact; MCDR/RMCDR dominance on 200 replicate sets"


# --- 3: coreset 2-approximation -----------------------------------------------------


def test_criterion_03_coreset_two_approximation():
    with criterion(3) as info:
        rng = np.random.default_rng(3)
        t0 = time.perf_counter()
        checked, worst = 0, 0.0
        for _ in range(150):
            n = int(rng.integers(2, 9))
            pts = rng.normal(size=(n, 2))
            pool = [(f"p{i:02d}", pts[i]) for i in range(n)]
            for k in range(1, min(3, n) + 1):
                chosen = strategies.select_coreset([], pool, k)
                centers = pts[[int(s[1:]) for s in chosen]]
                radius = max(min(float(np.linalg.norm(pt - c)) for c in centers)
                             for pt in pts)
                opt = min(
                    max(min(float(np.linalg.norm(pt - pts[c])) for c in combo)
                        for pt in pts)
                    for combo in itertools.combinations(range(n), k))
                assert radius <= 2.0 * opt + 1e-9
                if opt > 1e-12:
                    worst = max(worst, radius / opt)
                checked += 1
        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0
        info["detail"] = f"{checked} cases, worst ratio {worst:.3f}, {elapsed:.1f}s"


# --- 4: ignore-pixel gradient -------------------------------------------------------


def test_criterion_04_ignore_pixel_gradient():
    with criterion(4) as info:
        rng = np.random.default_rng(4)
        h, w, k = 6, 8, 3
        logits = rng.normal(size=(h, w, k))
        target = rng.integers(0, k, size=(h, w))
        target[:, w // 2:] = IGNORE

        base = segbackend.dice_loss(logits, target, softmax=True)
        worst = 0.0
        for i, j in itertools.product(range(h), range(w)):
            if target[i, j] != IGNORE:
                continue
            for c in range(k):
                bumped = logits.copy()
                bumped[i, j, c] += 1e-4
                moved = segbackend.dice_loss(bumped, target, softmax=True)
                worst = max(worst, abs(moved - base))
        assert worst < 1e-9

        half = segbackend.dice_loss(logits[:, : w // 2], target[:, : w // 2], softmax=True)
        assert abs(base - half) < 1e-9
        probs = rng.dirichlet(np.ones(k), size=(h, w))
        t2 = rng.integers(0, k, size=(h, w))
        t2[: h // 2] = IGNORE
        assert abs(segbackend.dice_loss(probs, t2)
                   - segbackend.dice_loss(probs[h // 2:], t2[h // 2:])) < 1e-9
        info["detail"] = f"max ignored-pixel effect {worst:.1e}"


# --- 5: config fidelity -------------------------------------------------------------

MODEL_LISTING = """MODEL:
    FEATURE_EVAL_SETTINGS:
        EVAL_MODE_ON: False
    TRUNK:
        NAME: unet
        UNET:
            n_channels: 1
            bilinear: True
    WEIGHTS_INIT:
      PARAMS_FILE: data/unet_best.pth

LOSS:
    name: dice_loss
    dice_loss:
      softmax: True
      ignore_index: -1
OPTIMIZER:
    name: sgd
    momentum: 0.9
"""

DATA_LISTING = """DATA:
    NUM_DATALOADER_WORKERS: 1
    TRAIN:
        DATA_SOURCES: [disk_filelist]
        LABEL_SOURCES: [disk_filelist]
        DATASET_NAMES: [seg_data]
        BATCHSIZE_PER_REPLICA: 3
        TRANSFORMS:
        - name: RandomResizedCrop
          size: 224
        - name: ToTensor
        - name: Normalize
          mean: [0.485]
          std: [0.229]
        MMAP_MODE: True
        COPY_TO_LOCAL_DISK: False
        COPY_DESTINATION_DIR: ""
        DATA_LIMIT: 3
        COLLATE_FUNCTION: msk_collator
"""

AL_SECTION = """ACTIVE_LEARNING:
    strategy: ENT
    seed_size: 10
    query_size: 10
    rounds: 5
"""


def test_criterion_05_config_fidelity():
    with criterion(5) as info:
        cfg = parse_run_config("\n".join([MODEL_LISTING, DATA_LISTING, AL_SECTION]))
        assert cfg.optimizer.momentum == 0.9
        assert cfg.loss.name == "dice_loss"
        assert cfg.loss.softmax is True
        assert cfg.loss.ignore_index == -1
        assert cfg.model.trunk == "unet"
        train = cfg.data.split("train")
        assert train.batch_size == 3
        assert train.data_limit == 3
        chain = [(t.name, t.params) for t in train.transforms]
        assert chain == [
            ("RandomResizedCrop", {"size": 224}),
            ("ToTensor", {}),
            ("Normalize", {"mean": [0.485], "std": [0.229]}),
        ]
        info["detail"] = "reference model + data snippets parse exactly"


# --- 6: protocol engine -------------------------------------------------------------

RETINA_PROTOCOL = """start:
    type: load
    dataloader: OCTLoader
    transitions:
        - next:
              target: seg_ilm
seg_ilm:
    type: octSegmentation
    question: Inner Limiting Membrane
    annotation_type: line
    transitions:
        - "*":
              target: macular_foramen
macular_foramen:
    question: Macular Foramen
    type: select
    options:
        - '-'
        - pseudo
        - lamellar
        - full-thickness
    transitions:
        - '*':
              target: summary
summary:
    type: summary_oct
    question: Summary
    transitions:
        - '*':
              target: end
"""

LINE_PAYLOAD = {"points": [[0, 10], [63, 12]], "uncertain": False}


def test_criterion_06_protocol_engine():
    with criterion(6) as info:
        proto = parse_protocol(RETINA_PROTOCOL)
        assert len(proto.states) == 5  # the four written states plus the implicit end

        engine = SessionEngine(proto)
        for option in ["-", "pseudo", "lamellar", "full-thickness"]:
            session = engine.create_session("vol_000_slice_000")
            engine.advance(session.session_id, "next")
            engine.advance(session.session_id, dict(LINE_PAYLOAD))
            engine.advance(session.session_id, option)
            session, status = engine.advance(session.session_id, "done")
            assert session.completed
            assert session.visited == ["start", "seg_ilm", "macular_foramen",
                                       "summary", "end"]
            record = status["record"]
            answers = {a.question: a.answer for a in record.answers}
            assert answers["Macular Foramen"] == option
            assert len(record.lines) == 1

        cases = list(_mutations())
        assert len(cases) == 20
        for desc, text in cases:
            with pytest.raises(ProtocolError):
                parse_protocol(text)

        session = engine.create_session("vol_000_slice_001")
        engine.advance(session.session_id, "next")
        engine.advance(session.session_id, dict(LINE_PAYLOAD))
        engine.advance(session.session_id, "pseudo")
        session = engine.jump(session.session_id, "seg_ilm")
        assert session.current_state == "seg_ilm"
        assert session.answers["macular_foramen"] == "pseudo"  # the log survives
        info["detail"] = "4 option walks, 20 named parse errors, jump keeps answers"


# --- 7: mask rendering --------------------------------------------------------------


def test_criterion_07_mask_rendering(tmp_path):
    with criterion(7) as info:
        spec = SyntheticSpec(volumes=5, slices_per_volume=4, rng_seed=17)
        ws = tmp_path / "ws"
        generate_synthetic(spec, ws)
        order = spec.layer_order
        h = w = 64

        rng = np.random.default_rng(7)
        for _ in range(500):
            items = []
            for cls in order:
                if rng.random() < 0.15:
                    continue
                xs = np.sort(rng.choice(w, size=int(rng.integers(2, 7)), replace=False))
                pts = [(float(x), float(rng.uniform(0, h - 1))) for x in xs]
                items.append(BoundaryLine(class_name=cls, points=pts))
            rec = AnnotationRecord(sample_id="synthetic", annotator_id="rand", items=items)
            data = render_mask(rec, h, w, order).data
            for j in range(w):
                col = data[:, j]
                kept = col[col != IGNORE]
                assert np.all(np.diff(kept) >= 0)  # labels never decrease downwards

        agreements = []
        sample_ids = sorted(
            p.stem for p in (ws / "ground_truth").glob("*.png"))
        assert len(sample_ids) == 20
        for sid in sample_ids:
            rec = oracle_annotate(sid, ws)
            data = render_mask(rec, h, w, order).data
            gt = ground_truth_mask(ws, sid)
            agreements.append(float((data == gt).mean()))
        assert min(agreements) >= 0.99

        rec = oracle_annotate(sample_ids[0], ws)
        reduced = AnnotationRecord(
            sample_id=rec.sample_id, annotator_id=rec.annotator_id,
            items=[ln for ln in rec.lines if ln.class_name != order[1]])
        assert (render_mask(reduced, h, w, order).data == IGNORE).any()
        info["detail"] = (f"500 random renders monotone, "
                          f"oracle agreement >= {min(agreements):.4f}")


# --- 8: end-to-end AL simulation ----------------------------------------------------

SIM_CFG = """ACTIVE_LEARNING:
    strategy: ENT
    seed_size: 10
    query_size: 10
    rounds: 5
    mc_passes: 4
    rng_seed: 0
MODEL:
    TRUNK:
        NAME: unet
        UNET:
            n_channels: 1
            base_channels: 8
            dropout: 0.5
DATA:
    TRAIN:
        BATCHSIZE_PER_REPLICA: 8
        TRANSFORMS:
        - name: ToTensor
        - name: Normalize
          mean: [0.5]
          std: [0.5]
OPTIMIZER:
    name: sgd
    momentum: 0.9
    lr: 0.15
    num_epochs: 12
LOSS:
    name: dice_loss
    dice_loss:
        softmax: True
        ignore_index: -1
"""


def test_criterion_08_end_to_end_simulation(tmp_path):
    with criterion(8) as info:
        cfg = parse_run_config(SIM_CFG)
        spec = SyntheticSpec(volumes=20, slices_per_volume=10, height=64, width=64,
                             classes=4, rng_seed=0)
        names = ["ENT", "MCDR", "CORESET", "RANDOM"]
        cores = os.cpu_count() or 1
        t0 = time.perf_counter()
        curve = run_experiment(cfg, spec, names, folds=5, seeds=(0, 1, 2),
                               out_dir=tmp_path / "exp", workers=min(4, cores))
        elapsed = time.perf_counter() - t0
        assert not curve.failures, curve.failures

        # (a) annotated counts 10 + 10i over a 160-sample pool, then the full fit
        steps = [6.25, 12.5, 18.75, 25.0, 31.25, 37.5, 100.0]
        for name in names:
            assert curve.budget_steps(name) == steps

        # (b) all strategies converge at full budget; the model clears the bar
        finals = {name: curve.mean_dice_at(name, 100.0) for name in names}
        assert max(finals.values()) - min(finals.values()) <= 0.03
        assert min(finals.values()) >= 0.90

        # (c) uncertainty sampling is not beaten by random at the 30% budget
        at30 = {name: curve.mean_dice_at(name, 31.25) for name in names}
        assert at30["ENT"] >= at30["RANDOM"] - 0.02
        assert at30["MCDR"] >= at30["RANDOM"] - 0.02

        # the spec budget is 20 min on 4 cores; scale when fewer are available
        assert elapsed < 1200.0 * max(1.0, 4.0 / cores)
        info["detail"] = (
            f"finals {min(finals.values()):.3f}-{max(finals.values()):.3f}; 30% budget "
            f"ENT {at30['ENT']:.3f} MCDR {at30['MCDR']:.3f} RANDOM {at30['RANDOM']:.3f}; "
            f"{elapsed / 60.0:.1f} min on {cores} core(s)")


# --- 9: controller over HTTP --------------------------------------------------------


def test_criterion_09_controller_over_http(tmp_path):
    with criterion(9) as info:
        spec = SyntheticSpec(volumes=3, slices_per_volume=4, rng_seed=11)
        for name in ("ws-budget", "ws-target", "ws-empty"):
            generate_synthetic(spec, tmp_path / name)

        cfg = make_cfg(seed_size=4, query_size=3, rounds=2, num_epochs=2)
        ctrl = CycleController(cfg, tmp_path / "ws-budget", auto_advance=False)
        client = TestClient(build_app(ctrl))
        assert client.post("/iteration").json()["seeded"] is True

        staged = client.get("/queries/latest").json()
        in_flight = set(ctrl.dm.pool.in_flight)
        ctrl.dispatch_new_samples(ctrl.state.active_query)  # idempotent re-dispatch
        assert set(ctrl.dm.pool.in_flight) == in_flight
        assert client.get("/queries/latest").json() == staged

        while client.get("/status").json()["phase"] != "DONE":
            docs = [record_to_json(oracle_annotate(s["sample_id"], tmp_path / "ws-budget"))
                    for s in client.get("/queries/latest").json()["samples"]]
            out = client.post("/annotations", json={"records": docs}).json()
            assert out["round_resolved"] is True
            assert client.post("/iteration").status_code == 200
        st = client.get("/status").json()
        assert st["stop_reason"] == "budget"
        assert client.post("/iteration").status_code == 409
        for pair in zip(st["phase_log"], st["phase_log"][1:]):
            assert tuple(pair) in ADMITTED

        cfg = make_cfg(seed_size=4, query_size=3, rounds=5, num_epochs=2)
        cfg.active_learning.target_metric = "mean_dice"
        cfg.active_learning.target_value = 0.0
        ctrl = CycleController(cfg, tmp_path / "ws-target", auto_advance=False)
        ctrl.trigger_al_iteration()
        records = [oracle_annotate(sid, tmp_path / "ws-target")
                   for sid in ctrl.state.active_query.sample_ids]
        ctrl.handle_update_annotations(records)
        assert ctrl.trigger_al_iteration().stop_reason == "target-reached"

        cfg = make_cfg(seed_size=8, query_size=4, rounds=10, num_epochs=2)
        ctrl = CycleController(cfg, tmp_path / "ws-empty", auto_advance=False)
        ctrl.trigger_al_iteration()
        while ctrl.state.phase != "DONE":
            records = [oracle_annotate(sid, tmp_path / "ws-empty")
                       for sid in ctrl.state.active_query.sample_ids]
            ctrl.handle_update_annotations(records)
            ctrl.trigger_al_iteration()
        assert ctrl.state.stop_reason == "pool-empty"
        info["detail"] = "HTTP cycle admitted; budget/target/pool-empty all reached"


# --- 10: experiment determinism -----------------------------------------------------


def test_criterion_10_experiment_determinism(tmp_path):
    with criterion(10) as info:
        spec = SyntheticSpec(volumes=4, slices_per_volume=2, rng_seed=7)
        texts = []
        for i in range(2):
            cfg = make_cfg(strategy="ENT", seed_size=2, query_size=1, rounds=1,
                           num_epochs=2)
            curve = run_experiment(cfg, spec, ["ENT"], folds=2, seeds=(0, 1),
                                   out_dir=tmp_path / f"run{i}", include_full=False)
            out = tmp_path / f"results{i}.csv"
            curve.write_csv(out)
            texts.append(out.read_text())
        assert texts[0] == texts[1]
        info["detail"] = f"{len(texts[0].splitlines()) - 1} identical CSV rows twice"
