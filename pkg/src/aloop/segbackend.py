"""Segmentation backend: a small encoder-decoder trunk, training with soft
dice loss and partial-label masking, posteriors (plain and stochastic-dropout
replicates), bottleneck embeddings, and the metric/transform registries.

The reference trunk is U-Net-shaped with 2 down/up levels and 8 base channels,
with dropout before the bottleneck so stochastic forward passes yield distinct
posterior replicates. It trains in minutes on CPU at 64x64.
"""

from __future__ import annotations

import copy
import math
import warnings as _warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelSpec, RunConfig, TransformSpec
from .util import stable_seed

SNAPSHOT_FORMAT_VERSION = 1
IGNORE = -1


# --- model -----------------------------------------------------------------


class _ConvBlock(nn.Module):
    # GroupNorm rather than BatchNorm: no running statistics, so train and
    # eval agree and MC-dropout passes stay well calibrated at tiny batch sizes
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.g1 = nn.GroupNorm(min(4, c_out), c_out)
        self.c2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.g2 = nn.GroupNorm(min(4, c_out), c_out)

    def forward(self, x):
        return F.relu(self.g2(self.c2(F.relu(self.g1(self.c1(x))))))


class SmallUNet(nn.Module):
    """Two-level U-Net with bilinear upsampling and pre-bottleneck dropout."""

    def __init__(self, n_channels: int = 1, n_classes: int = 2, base: int = 8,
                 dropout: float = 0.5, bilinear: bool = True):
        super().__init__()
        self.n_channels = n_channels
        self.n_classes = n_classes
        self.base = base
        self.dropout_rate = dropout
        self.enc1 = _ConvBlock(n_channels, base)
        self.enc2 = _ConvBlock(base, base * 2)
        self.pool = nn.MaxPool2d(2)
        self.drop = nn.Dropout(dropout)
        self.bottleneck = _ConvBlock(base * 2, base * 4)
        if bilinear:
            self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        else:
            self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.dec2 = _ConvBlock(base * 6, base * 2)
        self.dec1 = _ConvBlock(base * 3, base)
        self.head = nn.Conv2d(base, n_classes, 1)

    def encode(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        b = self.bottleneck(self.drop(self.pool(e2)))
        return e1, e2, b

    def forward(self, x):
        e1, e2, b = self.encode(x)
        d2 = self.dec2(torch.cat([self.up(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up(d2), e1], dim=1))
        return self.head(d1)

    def bottleneck_embedding(self, x):
        _, _, b = self.encode(x)
        return b.mean(dim=(2, 3))


def _build_unet(spec: ModelSpec, n_classes: int) -> nn.Module:
    params = dict(spec.trunk_params)
    return SmallUNet(
        n_channels=spec.n_channels,
        n_classes=n_classes,
        base=int(params.get("base_channels", 8)),
        dropout=float(params.get("dropout", 0.5)),
        bilinear=bool(params.get("bilinear", True)),
    )


_TRUNKS: Dict[str, Callable[[ModelSpec, int], nn.Module]] = {"unet": _build_unet}


def register_trunk(name: str, builder: Callable[[ModelSpec, int], nn.Module]) -> None:
    _TRUNKS[name] = builder


def trunk_names() -> set:
    return set(_TRUNKS)


def optimizer_names() -> set:
    return {"sgd"}


def loss_names() -> set:
    return {"dice_loss"}


def metric_names() -> set:
    return {"dice_per_class", "mean_dice"}


def collate_names() -> set:
    return {"msk_collator"}


@dataclass
class TrainedModel:
    net: nn.Module
    descriptor: dict
    train_log: list = field(default_factory=list)
    rng_seed: int = 0

    @property
    def dropout_rate(self) -> float:
        return float(self.descriptor.get("dropout", 0.0))

    @property
    def n_classes(self) -> int:
        return int(self.descriptor["n_classes"])

    @property
    def eval_transforms(self) -> list:
        """The deterministic part of the training chain; inference inputs must
        pass through the same normalization the net was fitted on."""
        return [TransformSpec(name=name, params=dict(params))
                for name, params in self.descriptor.get("eval_transforms", [])]


def save_model(model: TrainedModel, path) -> None:
    torch.save(
        {
            "format_version": SNAPSHOT_FORMAT_VERSION,
            "descriptor": model.descriptor,
            "state_dict": model.net.state_dict(),
        },
        path,
    )


def load_model(path) -> TrainedModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    version = blob.get("format_version")
    if version != SNAPSHOT_FORMAT_VERSION:
        raise ValueError(f"unsupported snapshot format version {version!r}")
    desc = blob["descriptor"]
    spec = ModelSpec(trunk=desc["trunk"], n_channels=desc["n_channels"],
                     trunk_params=dict(desc.get("trunk_params", {})))
    net = _TRUNKS[desc["trunk"]](spec, desc["n_classes"])
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return TrainedModel(net=net, descriptor=desc)


# --- transforms --------------------------------------------------------------
#
# Joint image/mask transforms. Pipeline convention: images enter as uint8
# (H, W) grayscale; ToTensor scales to float [0, 1] and adds the channel axis.


def _t_to_tensor(img, mask, rng, params):
    img = np.asarray(img, dtype=np.float32)
    if img.max() > 1.5:
        img = img / 255.0
    return img, mask


def _t_normalize(img, mask, rng, params):
    mean = np.asarray(params.get("mean", [0.0]), dtype=np.float32)
    std = np.asarray(params.get("std", [1.0]), dtype=np.float32)
    return (img - mean[0]) / std[0], mask


def _t_random_resized_crop(img, mask, rng, params):
    size = int(params.get("size", img.shape[0]))
    h, w = img.shape[:2]
    scale = rng.uniform(0.5, 1.0)
    ch = max(1, min(h, int(round(h * scale))))
    cw = max(1, min(w, int(round(w * scale))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    img_c = img[top : top + ch, left : left + cw]
    mask_c = mask[top : top + ch, left : left + cw] if mask is not None else None
    img_t = F.interpolate(
        torch.as_tensor(img_c, dtype=torch.float32)[None, None], size=(size, size),
        mode="bilinear", align_corners=False,
    )[0, 0].numpy()
    if mask_c is None:
        return img_t, None
    mask_t = F.interpolate(
        torch.as_tensor(mask_c, dtype=torch.float32)[None, None], size=(size, size),
        mode="nearest",
    )[0, 0].numpy().astype(mask.dtype)
    return img_t, mask_t


_TRANSFORMS = {
    "ToTensor": _t_to_tensor,
    "Normalize": _t_normalize,
    "RandomResizedCrop": _t_random_resized_crop,
}

# transforms that also run at inference time (augmentations are train-only)
DETERMINISTIC_TRANSFORMS = ("ToTensor", "Normalize")


def transform_names() -> set:
    return set(_TRANSFORMS)


def apply_transforms(chain: Sequence[TransformSpec], img, mask, rng) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    img = np.asarray(img, dtype=np.float32)
    for t in chain:
        img, mask = _TRANSFORMS[t.name](img, mask, rng, t.params)
    return img, mask


# --- dice loss / metric -------------------------------------------------------


def _dice_loss_core(x: torch.Tensor, target: torch.Tensor, ignore_index: int,
                    softmax: bool, eps: float) -> torch.Tensor:
    """x: (B, K, H, W) logits or probs; target: (B, H, W) with ignore_index holes."""
    if softmax:
        probs = F.softmax(x, dim=1)
    else:
        probs = x
    valid = (target != ignore_index).unsqueeze(1).to(probs.dtype)
    if valid.sum() == 0:
        _warnings.warn("dice_loss: every pixel is ignored, no training signal", stacklevel=2)
        return probs.sum() * 0.0
    k = probs.shape[1]
    tgt = target.clamp(min=0)
    one_hot = F.one_hot(tgt.long(), num_classes=k).permute(0, 3, 1, 2).to(probs.dtype)
    probs = probs * valid
    one_hot = one_hot * valid
    dims = (0, 2, 3)
    inter = (probs * one_hot).sum(dim=dims)
    denom = probs.sum(dim=dims) + one_hot.sum(dim=dims)
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def dice_loss(x, target, ignore_index: int = IGNORE, softmax: bool = False,
              eps: float = 1e-6) -> float:
    """Soft dice loss of a posterior (H, W, K channel-last) against a mask.

    Pixels whose target equals ``ignore_index`` contribute nothing to the
    value or the gradient. With ``softmax=True`` the input is taken as logits.
    Computed in float64; returns a plain float in [0, 1].
    """
    x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
    target = torch.as_tensor(np.asarray(target))
    if x.ndim == 3:
        x = x[None]
        target = target[None]
    x = x.permute(0, 3, 1, 2)
    return float(_dice_loss_core(x, target, ignore_index, softmax, eps).item())


def dice_metric(pred_mask, gt_mask, class_k: int, ignore_index: int = IGNORE) -> float:
    """Hard dice 2|P.G| / (|P|+|G|) for one class, 1.0 when both sets are empty.

    Pixels where the ground truth equals ``ignore_index`` are excluded.
    """
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    keep = gt != ignore_index
    p = (pred == class_k) & keep
    g = (gt == class_k) & keep
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


# --- inference ----------------------------------------------------------------


def _to_input_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    arrs = []
    for img in images:
        a = np.asarray(img, dtype=np.float32)
        if a.max() > 1.5:
            a = a / 255.0
        if a.ndim == 2:
            a = a[None]
        arrs.append(a)
    return torch.from_numpy(np.stack(arrs))


def _model_inputs(model: TrainedModel, images: Sequence[np.ndarray]) -> torch.Tensor:
    """Raw images through the model's own normalization chain, batched."""
    chain = model.eval_transforms
    if not chain:
        return _to_input_tensor(images)
    rng = np.random.default_rng(0)  # unused: the eval chain is deterministic
    return _to_input_tensor([apply_transforms(chain, img, None, rng)[0] for img in images])


def predict_posteriors(model: TrainedModel, images: Sequence[np.ndarray],
                       batch_size: int = 32) -> List[np.ndarray]:
    """Deterministic posteriors (H, W, K), softmax-normalized per pixel."""
    model.net.eval()
    out: List[np.ndarray] = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = _model_inputs(model, images[i : i + batch_size])
            probs = F.softmax(model.net(x), dim=1)
            out.extend(probs.permute(0, 2, 3, 1).numpy())
    return out


def predict_posterior(model: TrainedModel, image: np.ndarray) -> np.ndarray:
    return predict_posteriors(model, [image])[0]


def predict_mask(model: TrainedModel, image: np.ndarray) -> np.ndarray:
    return predict_posterior(model, image).argmax(axis=-1).astype(np.int16)


def _dropout_modules(net: nn.Module):
    return [m for m in net.modules() if isinstance(m, (nn.Dropout, nn.Dropout2d))]


def mc_dropout_posteriors(model: TrainedModel, image: np.ndarray, passes: int,
                          rng_seed: int = 0) -> List[np.ndarray]:
    """``passes`` stochastic posterior replicates with dropout active."""
    return mc_dropout_posteriors_batch(model, [image], passes, rng_seed)[0]


def mc_dropout_posteriors_batch(model: TrainedModel, images: Sequence[np.ndarray],
                                passes: int, rng_seed: int = 0,
                                batch_size: int = 32) -> List[List[np.ndarray]]:
    """Per-image lists of ``passes`` replicates, computed batched for speed."""
    if passes < 2:
        raise ValueError("need at least 2 stochastic passes")
    if model.dropout_rate == 0.0:
        _warnings.warn("dropout rate is 0; stochastic replicates will be identical", stacklevel=2)
    net = model.net
    net.eval()
    drops = _dropout_modules(net)
    for m in drops:
        m.train()
    torch.manual_seed(rng_seed)
    out: List[List[np.ndarray]] = [[] for _ in images]
    try:
        with torch.no_grad():
            for _ in range(passes):
                for i in range(0, len(images), batch_size):
                    x = _model_inputs(model, images[i : i + batch_size])
                    probs = F.softmax(net(x), dim=1).permute(0, 2, 3, 1).numpy()
                    for j, p in enumerate(probs):
                        out[i + j].append(p)
    finally:
        for m in drops:
            m.eval()
    return out


def embed_batch(model: TrainedModel, images: Sequence[np.ndarray],
                batch_size: int = 32) -> List[np.ndarray]:
    """Bottleneck activations, spatially averaged; deterministic (dropout off)."""
    model.net.eval()
    out: List[np.ndarray] = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = _model_inputs(model, images[i : i + batch_size])
            out.extend(model.net.bottleneck_embedding(x).numpy())
    return out


def embed(model: TrainedModel, image: np.ndarray) -> np.ndarray:
    return embed_batch(model, [image])[0]


def evaluate_dice(model: TrainedModel, items: Sequence[Tuple[np.ndarray, np.ndarray]],
                  n_classes: Optional[int] = None) -> Dict[int, float]:
    """Per-class dice aggregated over all items' pixels (micro average)."""
    k = n_classes if n_classes is not None else model.n_classes
    inter = np.zeros(k, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    for img, gt in items:
        pred = predict_mask(model, img)
        gt = np.asarray(gt)
        keep = gt != IGNORE
        for c in range(k):
            p = (pred == c) & keep
            g = (gt == c) & keep
            inter[c] += int((p & g).sum())
            sizes[c] += int(p.sum()) + int(g.sum())
    return {c: (1.0 if sizes[c] == 0 else 2.0 * inter[c] / sizes[c]) for c in range(k)}


def mean_dice(per_class: Dict[int, float]) -> float:
    return float(np.mean(list(per_class.values()))) if per_class else float("nan")


# --- training -------------------------------------------------------------------


def _make_optimizer(cfg: RunConfig, params):
    if cfg.optimizer.name != "sgd":
        raise ValueError(f"unknown optimizer {cfg.optimizer.name!r}")
    return torch.optim.SGD(params, lr=float(cfg.optimizer.lr), momentum=float(cfg.optimizer.momentum))


def _infer_classes(items) -> int:
    top = 0
    for _, mask in items:
        m = np.asarray(mask)
        m = m[m != IGNORE]
        if m.size:
            top = max(top, int(m.max()))
    return top + 1


def train(
    cfg: RunConfig,
    train_items: Sequence[Tuple[np.ndarray, np.ndarray]],
    val_items: Sequence[Tuple[np.ndarray, np.ndarray]] = (),
    init_params: Optional[str] = None,
    n_classes: Optional[int] = None,
    rng_seed: Optional[int] = None,
) -> TrainedModel:
    """Train the configured trunk with SGD(momentum) and masked dice loss.

    Returns the parameter snapshot with the best validation mean dice (the
    final epoch when no validation data is given). Deterministic given
    ``rng_seed``.
    """
    if not train_items:
        raise ValueError("training set is empty")
    if rng_seed is None:
        rng_seed = int(cfg.active_learning.rng_seed)
    if n_classes is None:
        n_classes = cfg.model.trunk_params.get("n_classes") or _infer_classes(train_items)
    n_classes = int(n_classes)

    torch.manual_seed(rng_seed)
    rng = np.random.default_rng(stable_seed(rng_seed, "transforms"))

    net = _TRUNKS[cfg.model.trunk](cfg.model, n_classes)
    if init_params:
        loaded = load_model(init_params)
        net.load_state_dict(loaded.net.state_dict())

    split = cfg.data.split("train")
    chain = split.transforms
    descriptor = {
        "trunk": cfg.model.trunk,
        "n_channels": cfg.model.n_channels,
        "n_classes": n_classes,
        "trunk_params": dict(cfg.model.trunk_params),
        "dropout": float(cfg.model.trunk_params.get("dropout", 0.5)),
        "eval_transforms": [(t.name, dict(t.params)) for t in chain
                            if t.name in DETERMINISTIC_TRANSFORMS],
    }
    model = TrainedModel(net=net, descriptor=descriptor, rng_seed=rng_seed)
    batch = max(1, int(split.batch_size))
    epochs = int(cfg.optimizer.num_epochs)
    opt = _make_optimizer(cfg, net.parameters())

    best_val = -math.inf
    best_state = None
    log: list = []
    order = np.arange(len(train_items))
    epoch_rng = np.random.default_rng(stable_seed(rng_seed, "shuffle"))

    for epoch in range(epochs):
        net.train()
        epoch_rng.shuffle(order)
        total, count = 0.0, 0
        for i in range(0, len(order), batch):
            idx = order[i : i + batch]
            imgs, masks = [], []
            for j in idx:
                img, mask = train_items[int(j)]
                img, mask = apply_transforms(chain, img, mask, rng)
                imgs.append(img)
                masks.append(np.asarray(mask, dtype=np.int64))
            x = _to_input_tensor(imgs)
            y = torch.from_numpy(np.stack(masks))
            loss = _dice_loss_core(net(x), y, cfg.loss.ignore_index, cfg.loss.softmax, 1e-6)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch} (lr too high?): {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.item()) * len(idx)
            count += len(idx)
        entry = {"epoch": epoch, "train_loss": total / max(count, 1), "val_dice": None}
        if val_items:
            per_class = evaluate_dice(model, val_items, n_classes)
            entry["val_dice"] = mean_dice(per_class)
            if entry["val_dice"] > best_val:
                best_val = entry["val_dice"]
                best_state = copy.deepcopy(net.state_dict())
        log.append(entry)

    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    model.train_log = log
    return model
