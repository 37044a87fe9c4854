"""Sample pool, annotation store, mask rendering and split serving.

Workspace layout (all paths relative to the workspace root):

    volumes/<volume_id>/meta.json        {"slice_count": N, "height": H, "width": W, ...}
    volumes/<volume_id>/slice_<idx>.png  8-bit grayscale, zero-padded 3-digit idx
    layers.json                          {"layer_order": ["layer_1", ...]} top-to-bottom
    annotations/<sample_id>.json         AnnotationRecord (schema below)
    masks/<sample_id>.png                8-bit class indices, 255 = not annotated
    pool_state.json                      the annotated/unannotated/in-flight partition
    splits.json                          {"train": [...], "validation": [...], "test": [...]}

Annotation record schema::

    {"sample_id": ..., "annotator_id": ..., "timestamp": ISO-8601 UTC,
     "items": [{"kind": "line", "class": name, "points": [[x, y], ...], "uncertain": bool}
               | {"kind": "select", "question": ..., "answer": ...}]}

Masks store 255 for unresolved pixels on disk and -1 in memory, matching the
configured loss ignore_index.
"""

from __future__ import annotations

import io
import json
import math
import threading
import warnings as _warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .config import SplitSpec
from .segbackend import apply_transforms
from .util import atomic_write_bytes, atomic_write_json, read_json

IGNORE = -1
MASK_IGNORE_BYTE = 255
PARTITIONS = ("annotated", "unannotated", "in_flight")
SPLITS = ("train", "validation", "test")


class WorkspaceError(Exception):
    """Workspace missing or structurally broken."""


class UsageError(Exception):
    """Operation called outside its contract (bad literal, wrong pool state)."""


class RecordError(Exception):
    """An annotation record that cannot be rendered."""


@dataclass
class Sample:
    sample_id: str
    volume_id: str
    slice_index: int
    image_path: str
    height: int
    width: int
    annotation_path: Optional[str] = None
    mask_path: Optional[str] = None


@dataclass
class PoolState:
    annotated: set = field(default_factory=set)
    unannotated: set = field(default_factory=set)
    in_flight: set = field(default_factory=set)

    def check_partition(self, universe: set) -> None:
        assert self.annotated.isdisjoint(self.unannotated)
        assert self.annotated.isdisjoint(self.in_flight)
        assert self.unannotated.isdisjoint(self.in_flight)
        assert self.annotated | self.unannotated | self.in_flight == universe


@dataclass
class BoundaryLine:
    class_name: str
    points: List[Tuple[float, float]]
    uncertain: bool = False


@dataclass
class CategoricalAnswer:
    question: str
    answer: str


@dataclass
class AnnotationRecord:
    sample_id: str
    annotator_id: str
    timestamp: str = ""
    items: List[Union[BoundaryLine, CategoricalAnswer]] = field(default_factory=list)

    def __post_init__(self):
        if not self.timestamp:
            self.timestamp = datetime.now(timezone.utc).isoformat()

    @property
    def lines(self) -> List[BoundaryLine]:
        return [i for i in self.items if isinstance(i, BoundaryLine)]

    @property
    def answers(self) -> List[CategoricalAnswer]:
        return [i for i in self.items if isinstance(i, CategoricalAnswer)]


@dataclass
class SegMask:
    data: np.ndarray  # (H, W) int16, IGNORE where unresolved
    class_count: int


def record_to_json(record: AnnotationRecord) -> dict:
    items = []
    for item in record.items:
        if isinstance(item, BoundaryLine):
            items.append({
                "kind": "line",
                "class": item.class_name,
                "points": [[float(x), float(y)] for x, y in item.points],
                "uncertain": bool(item.uncertain),
            })
        else:
            items.append({"kind": "select", "question": item.question, "answer": item.answer})
    return {
        "sample_id": record.sample_id,
        "annotator_id": record.annotator_id,
        "timestamp": record.timestamp,
        "items": items,
    }


def record_from_json(doc: dict) -> AnnotationRecord:
    items: List[Union[BoundaryLine, CategoricalAnswer]] = []
    for raw in doc.get("items", []):
        kind = raw.get("kind")
        if kind == "line":
            points = [(float(x), float(y)) for x, y in raw.get("points", [])]
            items.append(BoundaryLine(raw.get("class", ""), points, bool(raw.get("uncertain", False))))
        elif kind == "select":
            items.append(CategoricalAnswer(raw.get("question", ""), raw.get("answer", "")))
        else:
            raise RecordError(f"unknown item kind {kind!r}")
    return AnnotationRecord(
        sample_id=doc["sample_id"],
        annotator_id=doc.get("annotator_id", ""),
        timestamp=doc.get("timestamp", ""),
        items=items,
    )


def save_mask(mask: SegMask, path: Path) -> None:
    data = mask.data
    if mask.class_count > MASK_IGNORE_BYTE:
        raise ValueError("mask PNG encoding supports at most 255 classes")
    byte = np.where(data == IGNORE, MASK_IGNORE_BYTE, data).astype(np.uint8)
    img = Image.fromarray(byte, mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_mask(path: Path, class_count: int = 0) -> SegMask:
    byte = np.asarray(Image.open(path).convert("L"))
    data = byte.astype(np.int16)
    data[byte == MASK_IGNORE_BYTE] = IGNORE
    if class_count == 0:
        valid = data[data != IGNORE]
        class_count = int(valid.max()) + 1 if valid.size else 0
    return SegMask(data=data, class_count=class_count)


# --- mask rendering ---------------------------------------------------------


def _boundary_heights(line: BoundaryLine, width: int) -> np.ndarray:
    """Per-column boundary height via linear interpolation; NaN where uncovered."""
    if len(line.points) < 2:
        raise RecordError(f"boundary {line.class_name!r} has fewer than 2 points")
    pts = sorted((float(x), float(y)) for x, y in line.points)
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    # one height per column: average duplicates at equal x
    ux, inverse = np.unique(xs, return_inverse=True)
    uy = np.zeros_like(ux)
    counts = np.zeros_like(ux)
    np.add.at(uy, inverse, ys)
    np.add.at(counts, inverse, 1)
    uy /= counts
    out = np.full(width, np.nan)
    lo = int(math.ceil(ux[0]))
    hi = int(math.floor(ux[-1]))
    if hi >= lo:
        cols = np.arange(max(lo, 0), min(hi, width - 1) + 1)
        out[cols] = np.interp(cols, ux, uy)
    return out


def render_mask(record: AnnotationRecord, height: int, width: int,
                layer_order: Sequence[str]) -> SegMask:
    """Turn boundary polylines into a per-pixel class mask.

    ``layer_order`` lists boundary classes top-to-bottom; with B boundaries
    there are B+1 region classes. A pixel gets class c when it sits between
    boundaries c-1 and c (virtual top/bottom boundaries at +-infinity); any
    pixel whose bracketing boundary is missing or does not cover its column is
    IGNORE. Crossing boundaries are clamped downward so columns stay monotone.
    """
    layer_order = list(layer_order)
    n_bounds = len(layer_order)
    class_count = n_bounds + 1
    seen = set()
    bounds = np.full((n_bounds, width), np.nan)
    for line in record.lines:
        if line.class_name not in layer_order:
            raise RecordError(f"unknown boundary class {line.class_name!r}")
        if line.class_name in seen:
            raise RecordError(f"duplicate boundary class {line.class_name!r}")
        seen.add(line.class_name)
        for x, y in line.points:
            if not (0 <= x < width and 0 <= y < height):
                raise RecordError(f"point ({x}, {y}) outside image bounds {width}x{height}")
        bounds[layer_order.index(line.class_name)] = _boundary_heights(line, width)

    # clamp crossings: each defined boundary is at least as deep as the
    # deepest defined boundary above it
    running = np.full(width, -np.inf)
    for k in range(n_bounds):
        defined = ~np.isnan(bounds[k])
        bounds[k, defined] = np.maximum(bounds[k, defined], running[defined])
        running[defined] = bounds[k, defined]

    out = np.full((height, width), IGNORE, dtype=np.int16)
    rows = np.arange(height, dtype=float)[:, None]
    defined = ~np.isnan(bounds)
    for c in range(class_count):
        low = np.full(width, -np.inf) if c == 0 else bounds[c - 1]
        high = np.full(width, np.inf) if c == n_bounds else bounds[c]
        ok = np.ones(width, dtype=bool)
        if c > 0:
            ok &= defined[c - 1]
        if c < n_bounds:
            ok &= defined[c]
        low = np.where(ok, low, np.inf)  # disable unresolved columns
        sel = (rows >= low[None, :]) & (rows < np.where(ok, high, -np.inf)[None, :])
        out[sel] = c
    return SegMask(data=out, class_count=class_count)


# --- the data manager ---------------------------------------------------------


class DataManager:
    """Owns one workspace: the pool partition, annotations, masks and splits.

    Mutations are serialized behind one exclusive lock; every write goes to a
    temp file first so a crash never leaves a torn state.
    """

    def __init__(self, workspace: Union[str, Path]):
        self.root = Path(workspace)
        self._lock = threading.RLock()
        self.samples: Dict[str, Sample] = {}
        self.pool = PoolState()
        self.layer_order: Optional[List[str]] = None
        self.rejections: List[dict] = []
        self.initialize_with_files(self.root)

    # -- initialization

    def initialize_with_files(self, workspace: Union[str, Path]) -> PoolState:
        """(Re)load the workspace; replays stored annotations and pool state."""
        self.root = Path(workspace)
        volumes_dir = self.root / "volumes"
        if not volumes_dir.is_dir():
            raise WorkspaceError(f"no volume index at {volumes_dir}")
        layers_path = self.root / "layers.json"
        self.layer_order = None
        if layers_path.exists():
            self.layer_order = list(read_json(layers_path)["layer_order"])

        self.samples = {}
        self.rejections = []
        for vol_dir in sorted(p for p in volumes_dir.iterdir() if p.is_dir()):
            meta_path = vol_dir / "meta.json"
            if not meta_path.exists():
                self.rejections.append({"volume": vol_dir.name, "reason": "missing meta.json"})
                continue
            meta = read_json(meta_path)
            vol_id = meta.get("volume_id", vol_dir.name)
            height, width = int(meta["height"]), int(meta["width"])
            for idx in range(int(meta["slice_count"])):
                sid = f"{vol_id}_{idx:03d}"
                img_path = vol_dir / f"slice_{idx:03d}.png"
                try:
                    with Image.open(img_path) as img:
                        img.load()
                        if img.size != (width, height):
                            raise WorkspaceError(
                                f"image is {img.size[0]}x{img.size[1]}, meta says {width}x{height}")
                except Exception as exc:  # corrupt or missing file: reject, keep going
                    self.rejections.append({"sample_id": sid, "reason": str(exc)})
                    continue
                self.samples[sid] = Sample(
                    sample_id=sid, volume_id=vol_id, slice_index=idx,
                    image_path=str(img_path), height=height, width=width,
                )

        annotated = set()
        for sid in self.samples:
            ann_path = self._annotation_path(sid)
            if ann_path.exists():
                annotated.add(sid)
                mask_path = self._mask_path(sid)
                if not mask_path.exists() and self.layer_order is not None:
                    record = record_from_json(read_json(ann_path))
                    sample = self.samples[sid]
                    mask = render_mask(record, sample.height, sample.width, self.layer_order)
                    save_mask(mask, mask_path)

        in_flight = set()
        state_path = self.root / "pool_state.json"
        if state_path.exists():
            stored = read_json(state_path)
            in_flight = set(stored.get("in_flight", [])) & set(self.samples) - annotated

        self.pool = PoolState(
            annotated=annotated,
            in_flight=in_flight,
            unannotated=set(self.samples) - annotated - in_flight,
        )
        self.pool.check_partition(set(self.samples))
        self._persist_pool()
        return self.pool

    # -- paths

    def _annotation_path(self, sid: str) -> Path:
        return self.root / "annotations" / f"{sid}.json"

    def _mask_path(self, sid: str) -> Path:
        return self.root / "masks" / f"{sid}.png"

    @property
    def class_count(self) -> int:
        if self.layer_order is None:
            raise UsageError("workspace has no layers.json; class count unknown")
        return len(self.layer_order) + 1

    # -- pool operations

    def _persist_pool(self) -> None:
        (self.root / "annotations").mkdir(exist_ok=True)
        (self.root / "masks").mkdir(exist_ok=True)
        atomic_write_json(self.root / "pool_state.json", {
            "annotated": sorted(self.pool.annotated),
            "unannotated": sorted(self.pool.unannotated),
            "in_flight": sorted(self.pool.in_flight),
        })

    def list_set(self, partition: str) -> List[Sample]:
        if partition not in PARTITIONS:
            raise UsageError(f"unknown partition {partition!r}; expected one of {PARTITIONS}")
        ids = sorted(getattr(self.pool, partition))
        out = []
        for sid in ids:
            sample = self.samples[sid]
            if partition == "annotated":
                sample = Sample(**{**sample.__dict__})
                sample.annotation_path = str(self._annotation_path(sid))
                sample.mask_path = str(self._mask_path(sid))
            out.append(sample)
        return out

    def remove_from_unannotated_set(self, ids: Sequence[str]) -> PoolState:
        """Move queried samples to in-flight; all-or-nothing."""
        with self._lock:
            missing = [sid for sid in ids if sid not in self.pool.unannotated]
            if missing:
                raise UsageError(f"not in the unannotated set: {missing}")
            self.pool.unannotated -= set(ids)
            self.pool.in_flight |= set(ids)
            self.pool.check_partition(set(self.samples))
            self._persist_pool()
            return self.pool

    def update_annotations(self, records: Sequence[AnnotationRecord]):
        """Store records, render masks, move samples to annotated.

        Per-record semantics: an invalid record is rejected with a reason and
        the rest proceed. Re-annotating an already annotated sample overwrites
        the stored record (latest wins). Returns (accepted, rejected) where
        accepted is a list of (sample_id, mask_path) and rejected a list of
        (sample_id, reason).
        """
        accepted: List[Tuple[str, str]] = []
        rejected: List[Tuple[str, str]] = []
        with self._lock:
            for record in records:
                sid = record.sample_id
                if sid not in self.samples:
                    rejected.append((sid, "unknown sample"))
                    continue
                if self.layer_order is None:
                    rejected.append((sid, "workspace has no layers.json"))
                    continue
                sample = self.samples[sid]
                try:
                    mask = render_mask(record, sample.height, sample.width, self.layer_order)
                except RecordError as exc:
                    rejected.append((sid, str(exc)))
                    continue
                ann_path = self._annotation_path(sid)
                mask_path = self._mask_path(sid)
                ann_path.parent.mkdir(exist_ok=True)
                mask_path.parent.mkdir(exist_ok=True)
                atomic_write_bytes(ann_path, json.dumps(record_to_json(record), indent=1).encode())
                save_mask(mask, mask_path)
                self.pool.unannotated.discard(sid)
                self.pool.in_flight.discard(sid)
                self.pool.annotated.add(sid)
                self.pool.check_partition(set(self.samples))
                self._persist_pool()
                accepted.append((sid, str(mask_path)))
        return accepted, rejected

    # -- data access

    def load_image(self, sid: str) -> np.ndarray:
        return np.asarray(Image.open(self.samples[sid].image_path).convert("L"))

    def load_annotation(self, sid: str) -> AnnotationRecord:
        return record_from_json(read_json(self._annotation_path(sid)))

    def load_sample_mask(self, sid: str) -> SegMask:
        return load_mask(self._mask_path(sid), self.class_count if self.layer_order else 0)

    def training_items(self, ids: Sequence[str]) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(self.load_image(sid), self.load_sample_mask(sid).data) for sid in ids]

    def splits(self) -> Dict[str, List[str]]:
        """Split assignment; without splits.json everything is 'train'."""
        path = self.root / "splits.json"
        if path.exists():
            stored = read_json(path)
            return {name: [sid for sid in stored.get(name, []) if sid in self.samples]
                    for name in SPLITS}
        return {"train": sorted(self.samples), "validation": [], "test": []}

    def write_splits(self, assignment: Dict[str, List[str]]) -> None:
        atomic_write_json(self.root / "splits.json",
                          {name: sorted(assignment.get(name, [])) for name in SPLITS})

    def get_dataloader(self, split: str, spec: SplitSpec, rng_seed: int = 0):
        """Batched (images, masks) arrays for the annotated part of a split.

        Applies the configured transform chain, honors batch size and data
        limit, deterministic given ``rng_seed``. Batches are
        (float32 (B, H, W) images, int16 (B, H, W) masks) pairs.
        """
        if split not in SPLITS:
            raise UsageError(f"unknown split {split!r}; expected one of {SPLITS}")
        ids = [sid for sid in self.splits()[split] if sid in self.pool.annotated]
        ids.sort()
        if spec.data_limit is not None:
            ids = ids[: spec.data_limit]
        rng = np.random.default_rng(rng_seed)
        batches = []
        for i in range(0, len(ids), max(1, spec.batch_size)):
            imgs, masks = [], []
            for sid in ids[i : i + spec.batch_size]:
                img = self.load_image(sid).astype(np.float32)
                mask = self.load_sample_mask(sid).data
                img, mask = apply_transforms(spec.transforms, img, mask, rng)
                imgs.append(img)
                masks.append(mask)
            batches.append((np.stack(imgs), np.stack(masks)))
        return batches

    def select_slices(self, volume_id: str, count: int = 3,
                      rng: Optional[np.random.Generator] = None) -> List[Sample]:
        """The middle slice plus random picks alternating between the two halves."""
        rng = rng or np.random.default_rng(0)
        vol = sorted(
            (s for s in self.samples.values() if s.volume_id == volume_id),
            key=lambda s: s.slice_index,
        )
        if not vol:
            raise UsageError(f"unknown volume {volume_id!r}")
        if len(vol) < 3:
            _warnings.warn(f"volume {volume_id} has fewer than 3 slices; returning all", stacklevel=2)
            return vol
        middle = len(vol) // 2
        first = list(range(0, middle))
        second = list(range(middle + 1, len(vol)))
        picks = [middle]
        halves = [first, second]
        turn = 0
        while len(picks) < min(count, len(vol)):
            half = halves[turn % 2]
            turn += 1
            if not half:
                continue
            choice = int(rng.integers(0, len(half)))
            picks.append(half.pop(choice))
        return [vol[i] for i in picks]
