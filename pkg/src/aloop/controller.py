"""The AL cycle orchestrator and its HTTP surface.

One controller owns one workspace and one RunConfig and drives the loop:
receive annotations, train on the annotated set, evaluate, check stop rules,
score the unannotated pool, dispatch the next query to the annotation tool
(webhook push with retries, or staged for pull via GET /queries/latest).

Phase machine: IDLE -> TRAINING -> QUERYING -> AWAITING_ANNOTATIONS ->
TRAINING -> ... with DONE reachable from anywhere. The seed round passes
through TRAINING without fitting anything (there is nothing to fit yet) and
dispatches a random seed query.

Concurrency: request handlers are thin; every cycle mutation runs under one
lock, and long iterations execute on a single background worker so at most
one train/query runs at a time.
"""

from __future__ import annotations

import threading
import time
import warnings as _warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import segbackend, strategies
from .config import RunConfig
from .datamgr import AnnotationRecord, DataManager, UsageError
from .strategies import QueryContext, QueryResult
from .util import stable_seed

PHASES = ("IDLE", "TRAINING", "QUERYING", "AWAITING_ANNOTATIONS", "DONE")
ADMITTED = {
    ("IDLE", "TRAINING"),
    ("TRAINING", "QUERYING"),
    ("QUERYING", "AWAITING_ANNOTATIONS"),
    ("AWAITING_ANNOTATIONS", "TRAINING"),
} | {(p, "DONE") for p in PHASES if p != "DONE"}
STOP_REASONS = ("budget", "target-reached", "pool-empty", "manual")


class ConflictError(Exception):
    """Iteration triggered while one is already running or inadmissible."""


@dataclass
class CycleState:
    phase: str = "IDLE"
    round_index: int = 0
    active_query: Optional[QueryResult] = None
    stop_reason: Optional[str] = None


@dataclass
class IterationReport:
    round_index: int
    seeded: bool
    trained: bool
    annotated_count: int
    metrics: Optional[dict] = None
    query: Optional[QueryResult] = None
    stop_reason: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "round": self.round_index,
            "seeded": self.seeded,
            "trained": self.trained,
            "annotated_count": self.annotated_count,
            "metrics": self.metrics,
            "queried": self.query.sample_ids if self.query else [],
            "stop_reason": self.stop_reason,
        }


class CycleController:
    """Drives the train -> query -> annotate loop over one workspace."""

    def __init__(self, cfg: RunConfig, workspace, auto_advance: bool = True,
                 extra_random: Optional[int] = None, retry_base: float = 0.2):
        self.cfg = cfg
        self.dm = DataManager(workspace)
        al = cfg.active_learning
        self.auto_advance = auto_advance
        # Fig-1-style clients may append extra random samples to each query
        self.extra_random = int(
            al.extras.get("extra_random", 0) if extra_random is None else extra_random)
        self.retry_base = retry_base

        self.state = CycleState()
        self.phase_log: List[str] = ["IDLE"]
        self.metrics_rows: List[dict] = []
        self.model: Optional[segbackend.TrainedModel] = None
        self.callback_url: Optional[str] = None
        self.staged_query: Optional[dict] = None
        self.queries_dispatched = 0
        self._dispatched_keys: set = set()
        self._pseudo: Dict[str, np.ndarray] = {}
        self._lock = threading.RLock()
        self._busy = False
        self._worker = ThreadPoolExecutor(max_workers=1, thread_name_prefix="aloop-cycle")
        self._pending = None

        splits = self.dm.splits()
        self.train_split = set(splits["train"])
        self.val_split = set(splits["validation"])
        self.initial_pool = len(self.train_split & set(self.dm.samples))

    # -- pool views

    def pool_ids(self) -> List[str]:
        return sorted(self.dm.pool.unannotated & self.train_split)

    def annotated_train_ids(self) -> List[str]:
        return sorted(self.dm.pool.annotated & self.train_split)

    # -- phase machine

    def _set_phase(self, new: str) -> None:
        old = self.state.phase
        assert (old, new) in ADMITTED, f"inadmissible phase transition {old} -> {new}"
        self.state.phase = new
        self.phase_log.append(new)

    def stop(self, reason: str = "manual") -> None:
        assert reason in STOP_REASONS
        with self._lock:
            if self.state.phase != "DONE":
                self.state.stop_reason = reason
                self._set_phase("DONE")

    # -- annotations in

    def handle_update_annotations(self, records: Sequence[AnnotationRecord]) -> dict:
        with self._lock:
            accepted, rejected = self.dm.update_annotations(records)
            statuses = [{"sample_id": sid, "status": "ok", "mask_path": path}
                        for sid, path in accepted]
            statuses += [{"sample_id": sid, "status": "rejected", "reason": reason}
                         for sid, reason in rejected]
            resolved = self._round_resolved()
            should_advance = (resolved and self.auto_advance
                              and self.state.phase == "AWAITING_ANNOTATIONS")
        if should_advance:
            self._pending = self._worker.submit(self._advance_quietly)
        return {"accepted": len(accepted), "statuses": statuses, "round_resolved": resolved}

    def _round_resolved(self) -> bool:
        if self.state.active_query is None:
            return False
        return all(sid in self.dm.pool.annotated
                   for sid in self.state.active_query.sample_ids)

    def _advance_quietly(self):
        try:
            return self.trigger_al_iteration()
        except ConflictError:
            return None

    # -- the iteration

    def trigger_al_iteration(self) -> IterationReport:
        with self._lock:
            if self._busy:
                raise ConflictError("an iteration is already running")
            phase = self.state.phase
            if phase == "DONE":
                raise ConflictError(f"cycle finished ({self.state.stop_reason})")
            if phase in ("TRAINING", "QUERYING"):
                raise ConflictError(f"cannot trigger while {phase}")
            if phase == "AWAITING_ANNOTATIONS" and not self._round_resolved():
                missing = [sid for sid in self.state.active_query.sample_ids
                           if sid not in self.dm.pool.annotated]
                raise ConflictError(f"round not resolved; awaiting {len(missing)} annotations")
            self._busy = True
        try:
            return self._run_iteration()
        finally:
            self._busy = False

    def _run_iteration(self) -> IterationReport:
        al = self.cfg.active_learning
        annotated = self.annotated_train_ids()

        if not annotated:
            # cold start: nothing to fit, dispatch a random seed query
            self._set_phase("TRAINING")
            self._set_phase("QUERYING")
            pool = self.pool_ids()
            result = strategies.rank_pool(
                {sid: 0.0 for sid in pool}, min(al.seed_size, len(pool)),
                "RANDOM", stable_seed(al.rng_seed, "seed-round"), 0)
            self.dispatch_new_samples(result)
            self._set_phase("AWAITING_ANNOTATIONS")
            return IterationReport(round_index=0, seeded=True, trained=False,
                                   annotated_count=0, query=result)

        self.state.round_index += 1
        round_idx = self.state.round_index
        self._set_phase("TRAINING")

        items = self.dm.training_items(annotated)
        if self._pseudo:
            items = items + [(self.dm.load_image(sid), mask)
                             for sid, mask in sorted(self._pseudo.items())]
            self._pseudo = {}
        val_ids = sorted(self.dm.pool.annotated & self.val_split)
        val_items = self.dm.training_items(val_ids)
        self.model = segbackend.train(
            self.cfg, items, val_items,
            init_params=self.cfg.model.weights_init,
            n_classes=self.dm.class_count,
            rng_seed=stable_seed(al.rng_seed, "train", round_idx),
        )

        eval_items = val_items if val_items else self.dm.training_items(annotated)
        per_class = segbackend.evaluate_dice(self.model, eval_items)
        meter = segbackend.mean_dice(per_class)
        metrics = {
            "round": round_idx,
            "annotated": len(annotated),
            "budget_pct": 100.0 * len(annotated) / max(self.initial_pool, 1),
            "mean_dice": meter,
            "dice_per_class": {str(c): v for c, v in per_class.items()},
            "meter_split": "validation" if val_items else "train",
        }
        self.metrics_rows.append(metrics)

        report = IterationReport(round_index=round_idx, seeded=False, trained=True,
                                 annotated_count=len(annotated), metrics=metrics)
        if (al.target_metric and al.target_value is not None
                and meter >= float(al.target_value)):
            self.state.stop_reason = "target-reached"
            self._set_phase("DONE")
            report.stop_reason = "target-reached"
            return report
        if self.queries_dispatched >= al.rounds:
            self.state.stop_reason = "budget"
            self._set_phase("DONE")
            report.stop_reason = "budget"
            return report
        pool = self.pool_ids()
        if not pool:
            self.state.stop_reason = "pool-empty"
            self._set_phase("DONE")
            report.stop_reason = "pool-empty"
            return report

        self._set_phase("QUERYING")
        result = self._run_query(pool, round_idx)
        self.dispatch_new_samples(result)
        self.queries_dispatched += 1
        self._set_phase("AWAITING_ANNOTATIONS")
        report.query = result
        return report

    def _run_query(self, pool: List[str], round_idx: int) -> QueryResult:
        al = self.cfg.active_learning
        ctx = self._build_context(pool, round_idx)
        impl = strategies.get_strategy(al.strategy)
        out = impl(ctx, min(al.query_size, len(pool)))
        if out.pseudo:
            queried = set(out.query.sample_ids)
            self._pseudo = {sid: mask for sid, mask in out.pseudo.items()
                            if sid not in queried}
        result = out.query
        if self.extra_random > 0:
            rest = [sid for sid in pool if sid not in set(result.sample_ids)]
            rng = np.random.default_rng(stable_seed(al.rng_seed, "extra", round_idx))
            extra = [rest[int(i)] for i in rng.permutation(len(rest))[: self.extra_random]]
            result = QueryResult(result.ranked + [(sid, 0.0) for sid in sorted(extra)],
                                 result.strategy, result.round_index, result.rng_seed)
        return result

    def _build_context(self, pool: List[str], round_idx: int) -> QueryContext:
        al = self.cfg.active_learning
        model = self.model
        images = [self.dm.load_image(sid) for sid in pool]
        cache: dict = {}

        def posterior(sid: str) -> np.ndarray:
            if "post" not in cache:
                cache["post"] = dict(zip(pool, segbackend.predict_posteriors(model, images)))
            return cache["post"][sid]

        def mc_posteriors(sid: str) -> List[np.ndarray]:
            if "mc" not in cache:
                reps = segbackend.mc_dropout_posteriors_batch(
                    model, images, al.mc_passes,
                    rng_seed=stable_seed(al.rng_seed, "mc", round_idx))
                cache["mc"] = dict(zip(pool, reps))
            return cache["mc"][sid]

        def embedding(sid: str) -> np.ndarray:
            if "emb" not in cache:
                cache["emb"] = dict(zip(pool, segbackend.embed_batch(model, images)))
            return cache["emb"][sid]

        def labeled_embeddings() -> List[np.ndarray]:
            ids = self.annotated_train_ids()
            return segbackend.embed_batch(model, [self.dm.load_image(s) for s in ids])

        # CEAL's pseudo-label threshold decays as training matures
        delta = max(0.0, al.ceal_delta - al.ceal_decay * max(0, round_idx - 1))
        return QueryContext(
            pool_ids=pool,
            round_index=round_idx,
            rng_seed=stable_seed(al.rng_seed, "query", round_idx),
            mc_passes=al.mc_passes,
            region_size=al.region_size,
            ceal_delta=delta,
            posterior=posterior,
            mc_posteriors=mc_posteriors,
            embedding=embedding,
            labeled_embeddings=labeled_embeddings,
        )

    # -- dispatch

    def dispatch_new_samples(self, result: QueryResult) -> dict:
        """Stage the query for pull and push it to the callback when registered.

        Idempotent per (round, sample_id): re-dispatching a round never creates
        duplicate in-flight entries. Push is at-least-once: 3 attempts with
        exponential backoff, then the staged copy remains for pull.
        """
        fresh = [sid for sid in result.sample_ids
                 if (result.round_index, sid) not in self._dispatched_keys
                 and sid in self.dm.pool.unannotated]
        if fresh:
            self.dm.remove_from_unannotated_set(fresh)
        self._dispatched_keys.update((result.round_index, sid) for sid in result.sample_ids)
        self.state.active_query = result
        self.staged_query = {
            "round": result.round_index,
            "strategy": result.strategy,
            "rng_seed": result.rng_seed,
            "samples": [{"sample_id": sid, "score": score,
                         "image_url": f"/images/{sid}.png"}
                        for sid, score in result.ranked],
        }
        status = {"mode": "pull", "delivered": False, "attempts": 0}
        if self.callback_url:
            status["mode"] = "push"
            import httpx

            for attempt in range(3):
                status["attempts"] = attempt + 1
                try:
                    resp = httpx.post(self.callback_url, json=self.staged_query, timeout=10.0)
                    resp.raise_for_status()
                    status["delivered"] = True
                    break
                except Exception:
                    if attempt < 2:
                        time.sleep(self.retry_base * (2 ** attempt))
            if not status["delivered"]:
                _warnings.warn(
                    f"callback {self.callback_url} unreachable after 3 attempts; "
                    "query staged for pull", stacklevel=2)
        return status

    # -- views

    def status(self) -> dict:
        return {
            "phase": self.state.phase,
            "round": self.state.round_index,
            "stop_reason": self.state.stop_reason,
            "busy": self._busy,
            "queries_dispatched": self.queries_dispatched,
            "counts": {
                "annotated": len(self.dm.pool.annotated),
                "unannotated": len(self.dm.pool.unannotated),
                "in_flight": len(self.dm.pool.in_flight),
                "pool": len(self.pool_ids()),
            },
            "active_query": (self.state.active_query.sample_ids
                             if self.state.active_query else []),
            "phase_log": list(self.phase_log),
        }


# --- HTTP surface ----------------------------------------------------------------


def build_app(controller: CycleController, protocol_engine=None):
    """FastAPI app over a controller; optionally mounts annotation sessions."""
    from fastapi import FastAPI, HTTPException, Response

    from .datamgr import RecordError, record_from_json

    app = FastAPI(title="aloop")
    app.state.controller = controller

    @app.post("/annotations")
    def post_annotations(body: dict):
        raw = body.get("records", body if isinstance(body, list) else None)
        if raw is None or not isinstance(raw, list):
            raise HTTPException(status_code=400, detail="expected {records: [...]}")
        try:
            records = [record_from_json(doc) for doc in raw]
        except (RecordError, KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"malformed record: {exc}") from None
        return controller.handle_update_annotations(records)

    @app.post("/iteration")
    def post_iteration():
        try:
            report = controller.trigger_al_iteration()
        except ConflictError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from None
        return report.to_json()

    @app.get("/queries/latest")
    def latest_query():
        if controller.staged_query is None:
            raise HTTPException(status_code=404, detail="no query dispatched yet")
        return controller.staged_query

    @app.get("/status")
    def status():
        return controller.status()

    @app.get("/metrics")
    def metrics():
        return {"rows": controller.metrics_rows}

    @app.post("/callback")
    def register_callback(body: dict):
        controller.callback_url = body.get("url") or None
        return {"callback_url": controller.callback_url}

    @app.post("/stop")
    def stop(body: Optional[dict] = None):
        controller.stop("manual")
        return controller.status()

    @app.get("/images/{sample_id}.png")
    def image(sample_id: str):
        if sample_id not in controller.dm.samples:
            raise HTTPException(status_code=404, detail=f"unknown sample {sample_id!r}")
        data = Path(controller.dm.samples[sample_id].image_path).read_bytes()
        return Response(content=data, media_type="image/png")

    if protocol_engine is not None:
        from .protocol import build_session_router

        app.include_router(build_session_router(protocol_engine))
    return app
