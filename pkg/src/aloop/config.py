"""Parse and validate the YAML run blueprint.

A run config has upper-case top-level sections (ACTIVE_LEARNING, MODEL, DATA,
METERS, OPTIMIZER, LOSS, DISTRIBUTED, MACHINE). MODEL, DATA, OPTIMIZER, LOSS
and ACTIVE_LEARNING are mandatory; the rest are optional. Unknown keys inside
known sections are preserved verbatim in per-section ``extras`` maps and
reported as warnings, so configs survive a parse/serialize round trip.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

import yaml

MANDATORY_SECTIONS = ("MODEL", "DATA", "OPTIMIZER", "LOSS", "ACTIVE_LEARNING")
OPTIONAL_SECTIONS = ("METERS", "DISTRIBUTED", "MACHINE")
SPLIT_NAMES = ("train", "validation", "test")

# Keys that are recognized-but-opaque: preserved without an "unknown key"
# warning because they belong to the documented file format.
_MODEL_OPAQUE = {"FEATURE_EVAL_SETTINGS"}
_SPLIT_OPAQUE = {"MMAP_MODE", "COPY_TO_LOCAL_DISK", "COPY_DESTINATION_DIR"}


class ConfigError(Exception):
    """Base class for run-config failures."""


class ConfigParseError(ConfigError):
    """YAML syntax error, annotated with a line number when available."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        suffix = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{suffix}")


class MissingSectionError(ConfigError):
    def __init__(self, section: str):
        self.section = section
        super().__init__(f"missing section: {section}")


@dataclass
class Violation:
    """One violated invariant: the field path and the rule it breaks."""

    path: str
    rule: str

    def __str__(self) -> str:
        return f"{self.path}: {self.rule}"


@dataclass
class TransformSpec:
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class ALSettings:
    strategy: str = "RANDOM"
    seed_size: int = 1
    query_size: int = 1
    rounds: int = 1
    mc_passes: int = 10
    region_size: int = 8
    ceal_delta: float = 0.05
    ceal_decay: float = 0.0033
    target_metric: Optional[str] = None
    target_value: Optional[float] = None
    rng_seed: int = 0
    extras: dict = field(default_factory=dict)


@dataclass
class ModelSpec:
    trunk: str = "unet"
    n_channels: int = 1
    trunk_params: dict = field(default_factory=dict)
    weights_init: Optional[str] = None
    extras: dict = field(default_factory=dict)


@dataclass
class SplitSpec:
    sources: list = field(default_factory=list)
    label_sources: list = field(default_factory=list)
    dataset_names: list = field(default_factory=list)
    batch_size: int = 1
    transforms: list = field(default_factory=list)  # list[TransformSpec]
    data_limit: Optional[int] = None  # None = unlimited
    collate: str = "msk_collator"
    extras: dict = field(default_factory=dict)


@dataclass
class DataSpec:
    splits: dict = field(default_factory=dict)  # split name -> SplitSpec
    num_workers: int = 1
    extras: dict = field(default_factory=dict)

    def split(self, name: str) -> SplitSpec:
        return self.splits.get(name, SplitSpec())


@dataclass
class OptimizerSpec:
    name: str = "sgd"
    momentum: float = 0.0
    lr: float = 0.1
    num_epochs: int = 20
    extras: dict = field(default_factory=dict)


@dataclass
class LossSpec:
    name: str = "dice_loss"
    softmax: bool = True
    ignore_index: int = -1
    extras: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    active_learning: ALSettings = field(default_factory=ALSettings)
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    meters: list = field(default_factory=list)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    distributed: dict = field(default_factory=dict)
    machine: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)  # unknown top-level sections
    warnings: list = field(default_factory=list, compare=False)


def _pop(mapping: dict, key: str, default=None):
    return mapping.pop(key, default) if isinstance(mapping, dict) else default


def _parse_transforms(raw, warnings: list, path: str) -> list:
    out = []
    if raw is None:
        return out
    if not isinstance(raw, list):
        warnings.append(f"{path}: TRANSFORMS should be a list, got {type(raw).__name__}")
        return out
    for item in raw:
        if isinstance(item, dict) and "name" in item:
            params = {k: v for k, v in item.items() if k != "name"}
            out.append(TransformSpec(name=str(item["name"]), params=params))
        elif isinstance(item, str):
            out.append(TransformSpec(name=item))
        else:
            warnings.append(f"{path}: unrecognized transform entry {item!r}")
    return out


def _parse_split(raw: dict, warnings: list, path: str) -> SplitSpec:
    raw = dict(raw or {})
    spec = SplitSpec(
        sources=_pop(raw, "DATA_SOURCES", []) or [],
        label_sources=_pop(raw, "LABEL_SOURCES", []) or [],
        dataset_names=_pop(raw, "DATASET_NAMES", []) or [],
        batch_size=_pop(raw, "BATCHSIZE_PER_REPLICA", 1),
        transforms=_parse_transforms(_pop(raw, "TRANSFORMS"), warnings, path),
        data_limit=_pop(raw, "DATA_LIMIT", None),
        collate=_pop(raw, "COLLATE_FUNCTION", "msk_collator"),
    )
    for key in list(raw):
        if key not in _SPLIT_OPAQUE:
            warnings.append(f"unknown key {path}.{key} preserved")
    spec.extras = raw
    return spec


def _parse_model(raw: dict, warnings: list) -> ModelSpec:
    raw = dict(raw or {})
    trunk_raw = dict(_pop(raw, "TRUNK", {}) or {})
    trunk_name = str(trunk_raw.pop("NAME", "unet"))
    trunk_params = dict(trunk_raw.pop(trunk_name.upper(), {}) or {})
    for key in trunk_raw:
        warnings.append(f"unknown key MODEL.TRUNK.{key} ignored")
    n_channels = trunk_params.pop("n_channels", 1)
    weights_raw = _pop(raw, "WEIGHTS_INIT", {}) or {}
    weights_init = weights_raw.get("PARAMS_FILE") if isinstance(weights_raw, dict) else None
    for key in list(raw):
        if key not in _MODEL_OPAQUE:
            warnings.append(f"unknown key MODEL.{key} preserved")
    return ModelSpec(
        trunk=trunk_name,
        n_channels=n_channels,
        trunk_params=trunk_params,
        weights_init=weights_init,
        extras=raw,
    )


def _parse_optimizer(raw: dict, warnings: list) -> OptimizerSpec:
    raw = dict(raw or {})
    spec = OptimizerSpec(
        name=str(_pop(raw, "name", "sgd")),
        momentum=_pop(raw, "momentum", 0.0),
        lr=_pop(raw, "lr", 0.1),
        num_epochs=_pop(raw, "num_epochs", 20),
    )
    spec.extras = raw
    return spec


def _parse_loss(raw: dict, warnings: list) -> LossSpec:
    raw = dict(raw or {})
    name = str(_pop(raw, "name", "dice_loss"))
    params = dict(_pop(raw, name, {}) or {})
    spec = LossSpec(
        name=name,
        softmax=params.pop("softmax", True),
        ignore_index=params.pop("ignore_index", -1),
    )
    raw.update(params)
    for key in list(raw):
        warnings.append(f"unknown key LOSS.{key} preserved")
    spec.extras = raw
    return spec


def _pop_ci(mapping: dict, key: str, default=None):
    """Pop a key accepting either case; this section has no canonical casing."""
    if key in mapping:
        return mapping.pop(key)
    if key.upper() in mapping:
        return mapping.pop(key.upper())
    return default


def _parse_al(raw: dict, warnings: list) -> ALSettings:
    raw = dict(raw or {})
    spec = ALSettings(
        strategy=str(_pop_ci(raw, "strategy", "RANDOM")),
        seed_size=_pop_ci(raw, "seed_size", 1),
        query_size=_pop_ci(raw, "query_size", 1),
        rounds=_pop_ci(raw, "rounds", 1),
        mc_passes=_pop_ci(raw, "mc_passes", 10),
        region_size=_pop_ci(raw, "region_size", 8),
        ceal_delta=_pop_ci(raw, "ceal_delta", 0.05),
        ceal_decay=_pop_ci(raw, "ceal_decay", 0.0033),
        target_metric=_pop_ci(raw, "target_metric", None),
        target_value=_pop_ci(raw, "target_value", None),
        rng_seed=_pop_ci(raw, "rng_seed", 0),
    )
    for key in list(raw):
        warnings.append(f"unknown key ACTIVE_LEARNING.{key} preserved")
    spec.extras = raw
    return spec


def _parse_data(raw: dict, warnings: list) -> DataSpec:
    raw = dict(raw or {})
    splits = {}
    for upper, lower in (("TRAIN", "train"), ("VALIDATION", "validation"), ("TEST", "test")):
        if upper in raw:
            splits[lower] = _parse_split(raw.pop(upper), warnings, f"DATA.{upper}")
    num_workers = _pop(raw, "NUM_DATALOADER_WORKERS", 1)
    for key in list(raw):
        warnings.append(f"unknown key DATA.{key} preserved")
    return DataSpec(splits=splits, num_workers=num_workers, extras=raw)


def parse_run_config(yaml_text: str) -> RunConfig:
    """Parse a YAML run blueprint into a :class:`RunConfig`.

    Raises :class:`ConfigParseError` on YAML syntax errors (with line number)
    and :class:`MissingSectionError` when a mandatory section is absent.
    """
    try:
        doc = yaml.safe_load(yaml_text)
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise ConfigParseError(f"YAML syntax error: {exc}", line=line) from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigParseError("run config must be a YAML mapping")

    doc = dict(doc)
    for section in MANDATORY_SECTIONS:
        if section not in doc:
            raise MissingSectionError(section)

    warnings: list = []
    cfg = RunConfig(
        model=_parse_model(doc.pop("MODEL"), warnings),
        data=_parse_data(doc.pop("DATA"), warnings),
        optimizer=_parse_optimizer(doc.pop("OPTIMIZER"), warnings),
        loss=_parse_loss(doc.pop("LOSS"), warnings),
        active_learning=_parse_al(doc.pop("ACTIVE_LEARNING"), warnings),
        meters=list(doc.pop("METERS", []) or []),
        distributed=dict(doc.pop("DISTRIBUTED", {}) or {}),
        machine=dict(doc.pop("MACHINE", {}) or {}),
    )
    for key in list(doc):
        warnings.append(f"unknown section {key} preserved")
    cfg.extras = doc
    cfg.warnings = warnings
    return cfg


def serialize_run_config(cfg: RunConfig) -> str:
    """Emit canonical YAML; parse(serialize(cfg)) == cfg on recognized fields."""
    trunk_block: dict = {"NAME": cfg.model.trunk}
    trunk_params = dict(cfg.model.trunk_params)
    trunk_params["n_channels"] = cfg.model.n_channels
    trunk_block[cfg.model.trunk.upper()] = trunk_params

    model: dict = {"TRUNK": trunk_block}
    if cfg.model.weights_init is not None:
        model["WEIGHTS_INIT"] = {"PARAMS_FILE": cfg.model.weights_init}
    model.update(cfg.model.extras)

    def split_block(s: SplitSpec) -> dict:
        block: dict = {
            "DATA_SOURCES": s.sources,
            "LABEL_SOURCES": s.label_sources,
            "DATASET_NAMES": s.dataset_names,
            "BATCHSIZE_PER_REPLICA": s.batch_size,
            "TRANSFORMS": [{"name": t.name, **t.params} for t in s.transforms],
            "COLLATE_FUNCTION": s.collate,
        }
        if s.data_limit is not None:
            block["DATA_LIMIT"] = s.data_limit
        block.update(s.extras)
        return block

    data: dict = {"NUM_DATALOADER_WORKERS": cfg.data.num_workers}
    for lower, upper in (("train", "TRAIN"), ("validation", "VALIDATION"), ("test", "TEST")):
        if lower in cfg.data.splits:
            data[upper] = split_block(cfg.data.splits[lower])
    data.update(cfg.data.extras)

    loss: dict = {
        "name": cfg.loss.name,
        cfg.loss.name: {"softmax": cfg.loss.softmax, "ignore_index": cfg.loss.ignore_index},
    }
    loss.update(cfg.loss.extras)

    optimizer: dict = {
        "name": cfg.optimizer.name,
        "momentum": cfg.optimizer.momentum,
        "lr": cfg.optimizer.lr,
        "num_epochs": cfg.optimizer.num_epochs,
    }
    optimizer.update(cfg.optimizer.extras)

    al = {
        "strategy": cfg.active_learning.strategy,
        "seed_size": cfg.active_learning.seed_size,
        "query_size": cfg.active_learning.query_size,
        "rounds": cfg.active_learning.rounds,
        "mc_passes": cfg.active_learning.mc_passes,
        "region_size": cfg.active_learning.region_size,
        "ceal_delta": cfg.active_learning.ceal_delta,
        "ceal_decay": cfg.active_learning.ceal_decay,
        "rng_seed": cfg.active_learning.rng_seed,
    }
    if cfg.active_learning.target_metric is not None:
        al["target_metric"] = cfg.active_learning.target_metric
    if cfg.active_learning.target_value is not None:
        al["target_value"] = cfg.active_learning.target_value
    al.update(cfg.active_learning.extras)

    doc = {
        "ACTIVE_LEARNING": al,
        "MODEL": model,
        "DATA": data,
        "METERS": cfg.meters,
        "OPTIMIZER": optimizer,
        "LOSS": loss,
        "DISTRIBUTED": cfg.distributed,
        "MACHINE": cfg.machine,
    }
    doc.update(cfg.extras)
    return yaml.safe_dump(doc, sort_keys=False)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate_run_config(
    cfg: RunConfig,
    strategy_names: Optional[Iterable[str]] = None,
    trunk_names: Optional[Iterable[str]] = None,
) -> list:
    """Check every invariant; returns a (possibly empty) list of Violations.

    Pure: never mutates ``cfg``; two calls yield identical results. Registry
    name sets default to the built-in registries but can be injected.
    """
    from . import segbackend, strategies  # local import avoids a cycle

    strategy_names = set(strategy_names if strategy_names is not None else strategies.strategy_names())
    trunk_names = set(trunk_names if trunk_names is not None else segbackend.trunk_names())

    out: list = []
    al = cfg.active_learning

    if al.strategy not in strategy_names:
        out.append(Violation("active_learning.strategy", f"unknown strategy {al.strategy!r}"))
    for attr, minimum in (("seed_size", 1), ("query_size", 1), ("rounds", 1), ("region_size", 1)):
        val = getattr(al, attr)
        if not _is_int(val) or val < minimum:
            out.append(Violation(f"active_learning.{attr}", f"must be an integer >= {minimum}"))
    if not _is_int(al.mc_passes) or al.mc_passes < 2:
        out.append(Violation("active_learning.mc_passes", "must be an integer >= 2"))
    if not _is_number(al.ceal_delta) or not (0.0 < al.ceal_delta <= 1.0):
        out.append(Violation("active_learning.ceal_delta", "must be in (0, 1]"))
    if not _is_number(al.ceal_decay) or not (0.0 <= al.ceal_decay < 1.0):
        out.append(Violation("active_learning.ceal_decay", "must be in [0, 1)"))
    if (al.target_metric is None) != (al.target_value is None):
        out.append(Violation("active_learning.target_metric", "target_metric and target_value must be set together"))
    if al.target_metric is not None and al.target_metric not in segbackend.metric_names():
        out.append(Violation("active_learning.target_metric", f"unknown metric {al.target_metric!r}"))

    if cfg.model.trunk not in trunk_names:
        out.append(Violation("model.trunk", f"unknown trunk {cfg.model.trunk!r}"))
    if not _is_int(cfg.model.n_channels) or cfg.model.n_channels < 1:
        out.append(Violation("model.n_channels", "must be an integer >= 1"))

    for split_name, split in cfg.data.splits.items():
        prefix = f"data.{split_name}"
        if not _is_int(split.batch_size) or split.batch_size < 1:
            out.append(Violation(f"{prefix}.batch_size", "must be an integer >= 1"))
        if split.data_limit is not None and (not _is_int(split.data_limit) or split.data_limit < 0):
            out.append(Violation(f"{prefix}.data_limit", "must be an integer >= 0"))
        for t in split.transforms:
            if t.name not in segbackend.transform_names():
                out.append(Violation(f"{prefix}.transforms", f"unknown transform {t.name!r}"))
        if split.collate not in segbackend.collate_names():
            out.append(Violation(f"{prefix}.collate", f"unknown collate {split.collate!r}"))

    for meter in cfg.meters:
        if meter not in segbackend.metric_names():
            out.append(Violation("meters", f"unknown metric {meter!r}"))

    opt = cfg.optimizer
    if opt.name not in segbackend.optimizer_names():
        out.append(Violation("optimizer.name", f"unknown optimizer {opt.name!r}"))
    if not _is_number(opt.momentum) or not (0.0 <= opt.momentum < 1.0):
        out.append(Violation("optimizer.momentum", "must be in [0, 1)"))
    if not _is_number(opt.lr) or opt.lr <= 0:
        out.append(Violation("optimizer.lr", "must be > 0"))
    if not _is_int(opt.num_epochs) or opt.num_epochs < 1:
        out.append(Violation("optimizer.num_epochs", "must be an integer >= 1"))

    if cfg.loss.name not in segbackend.loss_names():
        out.append(Violation("loss.name", f"unknown loss {cfg.loss.name!r}"))
    if not _is_int(cfg.loss.ignore_index):
        out.append(Violation("loss.ignore_index", "must be an integer"))

    return out


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read())
