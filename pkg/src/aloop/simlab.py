"""Synthetic layered images, an oracle annotator, and fold utilities.

The generator builds OCT-like volumes: K horizontal bands separated by
sinusoid-perturbed boundaries, band intensity = class mean + Gaussian noise.
Ground truth (full masks plus the exact boundary curves) lands in a
``ground_truth/`` directory next to the workspace volumes; the rest of the
system never reads it, only the oracle and the evaluation harness do.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .datamgr import (
    AnnotationRecord,
    BoundaryLine,
    SegMask,
    UsageError,
    load_mask,
    save_mask,
)
from .util import atomic_write_bytes, atomic_write_json, read_json

ORACLE_STRIDE = 4
ORACLE_TIMESTAMP = "2000-01-01T00:00:00+00:00"


class GenerationError(Exception):
    """Synthetic spec cannot be realized (gap constraint infeasible)."""


@dataclass
class SyntheticSpec:
    volumes: int = 20
    slices_per_volume: int = 10
    height: int = 64
    width: int = 64
    classes: int = 4
    amplitude: float = 4.0
    frequency: float = 1.0
    min_gap: float = 4.0
    noise_sigma: float = 18.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("volumes", "slices_per_volume", "height", "width",
                     "classes", "amplitude", "frequency", "min_gap"):
            if getattr(self, name) <= 0:
                raise GenerationError(f"spec field {name} must be positive")
        if self.classes < 2:
            raise GenerationError("need at least 2 classes")
        if self.noise_sigma < 0:
            raise GenerationError("noise_sigma must be >= 0")
        if self.jitter < 0:
            raise GenerationError(
                f"infeasible gap: {self.classes - 1} boundaries with amplitude "
                f"{self.amplitude} and min gap {self.min_gap} do not fit in height {self.height}")
        # boundary excursions stay >= 1 px inside the image
        if (self.band + self.min_gap) / 2.0 < 1.0:
            raise GenerationError("bands too thin: boundaries would leave the image")

    @property
    def band(self) -> float:
        return self.height / self.classes

    @property
    def jitter(self) -> float:
        """Slack left for random boundary offsets once amplitude and gap are paid."""
        return ((self.band - self.min_gap) / 2.0 - self.amplitude) / 2.0

    @property
    def layer_order(self) -> List[str]:
        return [f"layer_{b + 1}" for b in range(self.classes - 1)]


def _save_png(img: np.ndarray, path: Path) -> None:
    buf = io.BytesIO()
    Image.fromarray(img.astype(np.uint8), mode="L").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def generate_synthetic(spec: SyntheticSpec, out_dir: Union[str, Path]) -> Path:
    """Write a full workspace (volumes, layers.json, ground truth) under out_dir.

    Deterministic: the same spec produces byte-identical files.
    """
    root = Path(out_dir)
    gt_dir = root / "ground_truth"
    gt_dir.mkdir(parents=True, exist_ok=True)
    (root / "volumes").mkdir(exist_ok=True)

    n_bounds = spec.classes - 1
    bases = (np.arange(1, spec.classes) * spec.band)[:, None]  # (B, 1)
    cols = np.arange(spec.width, dtype=float)[None, :]
    rows = np.arange(spec.height, dtype=float)[:, None]
    means = np.linspace(30.0, 225.0, spec.classes)
    rng = np.random.default_rng(spec.rng_seed)
    jitter = spec.jitter

    for v in range(spec.volumes):
        vid = f"vol_{v:03d}"
        vol_dir = root / "volumes" / vid
        vol_dir.mkdir(exist_ok=True)
        phases = rng.uniform(0.0, 2.0 * math.pi, size=(n_bounds, 1))
        vol_offset = rng.uniform(-0.6 * jitter, 0.6 * jitter, size=(n_bounds, 1))
        for s in range(spec.slices_per_volume):
            drift = rng.uniform(-0.4 * jitter, 0.4 * jitter, size=(n_bounds, 1))
            angle = 2.0 * math.pi * spec.frequency * cols / spec.width + phases + 0.2 * s
            bounds = bases + spec.amplitude * np.sin(angle) + vol_offset + drift
            gaps = np.diff(bounds, axis=0)
            assert bounds.min() >= 1.0 and bounds.max() <= spec.height - 1.0
            assert gaps.size == 0 or gaps.min() >= spec.min_gap - 1e-9

            mask = (rows[None, :, :] >= bounds[:, None, :]).sum(axis=0).astype(np.int16)
            noise = rng.normal(0.0, spec.noise_sigma, size=(spec.height, spec.width))
            img = np.clip(means[mask] + noise, 0, 255)

            sid = f"{vid}_{s:03d}"
            _save_png(img, vol_dir / f"slice_{s:03d}.png")
            save_mask(SegMask(mask, spec.classes), gt_dir / f"{sid}.png")
            buf = io.BytesIO()
            np.save(buf, bounds.astype(np.float32))
            atomic_write_bytes(gt_dir / f"{sid}.npy", buf.getvalue())
        atomic_write_json(vol_dir / "meta.json", {
            "volume_id": vid,
            "slice_count": spec.slices_per_volume,
            "height": spec.height,
            "width": spec.width,
        })

    atomic_write_json(root / "layers.json", {"layer_order": spec.layer_order})
    atomic_write_json(root / "synthetic_spec.json", spec.__dict__)
    return root


# --- ground-truth access ------------------------------------------------------


def ground_truth_mask(workspace: Union[str, Path], sample_id: str) -> np.ndarray:
    path = Path(workspace) / "ground_truth" / f"{sample_id}.png"
    if not path.exists():
        raise UsageError(f"no ground truth for {sample_id}")
    return load_mask(path).data


def ground_truth_bounds(workspace: Union[str, Path], sample_id: str) -> np.ndarray:
    path = Path(workspace) / "ground_truth" / f"{sample_id}.npy"
    if not path.exists():
        raise UsageError(f"no ground truth for {sample_id}")
    return np.load(path)


def ground_truth_items(workspace: Union[str, Path], sample_ids: Sequence[str]):
    """(image, gt mask) pairs for evaluation on held-out samples."""
    root = Path(workspace)
    items = []
    for sid in sample_ids:
        vid, idx = sid.rsplit("_", 1)
        img_path = root / "volumes" / vid / f"slice_{idx}.png"
        img = np.asarray(Image.open(img_path).convert("L"))
        items.append((img, ground_truth_mask(root, sid)))
    return items


# --- the oracle ---------------------------------------------------------------


def oracle_annotate(sample_id: str, workspace: Union[str, Path],
                    classes: Optional[Sequence[str]] = None,
                    stride: int = ORACLE_STRIDE) -> AnnotationRecord:
    """Boundary polylines sampled from the true curves every ``stride`` columns.

    ``classes`` restricts the record to a subset of boundary layers, standing
    in for a partial-labeling annotator; the rendered mask then contains
    IGNORE. Deterministic per sample.
    """
    root = Path(workspace)
    layer_order = read_json(root / "layers.json")["layer_order"]
    bounds = ground_truth_bounds(root, sample_id)
    width = bounds.shape[1]
    wanted = list(classes) if classes is not None else list(layer_order)
    unknown = [c for c in wanted if c not in layer_order]
    if unknown:
        raise UsageError(f"unknown layer classes {unknown}")

    xs = list(range(0, width, stride))
    if xs[-1] != width - 1:
        xs.append(width - 1)
    items = []
    for name in wanted:
        ys = bounds[layer_order.index(name)]
        points = [(float(x), float(ys[x])) for x in xs]
        items.append(BoundaryLine(class_name=name, points=points, uncertain=False))
    return AnnotationRecord(
        sample_id=sample_id,
        annotator_id="oracle",
        timestamp=ORACLE_TIMESTAMP,
        items=items,
    )


# --- folds --------------------------------------------------------------------


def kfold_volumes(volume_ids: Sequence[str], k: int = 5, rng_seed: int = 0) -> List[List[str]]:
    """Disjoint, exhaustive, volume-aligned folds; deterministic shuffle."""
    ids = sorted(volume_ids)
    if k < 2 or k > len(ids):
        raise UsageError(f"k must be in [2, {len(ids)}], got {k}")
    order = np.random.default_rng(rng_seed).permutation(len(ids))
    folds: List[List[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(ids[idx])
    return [sorted(f) for f in folds]


def load_spec_yaml(path: Union[str, Path]) -> SyntheticSpec:
    import yaml

    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise GenerationError("spec YAML must be a mapping")
    known = set(SyntheticSpec.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise GenerationError(f"unknown spec fields: {sorted(unknown)}")
    return SyntheticSpec(**doc)
