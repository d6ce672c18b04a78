"""Experiment configuration: one YAML file covering every tunable field.

Sections mirror the owning modules (``train``, ``kd``, ``augment``, ``grid``,
``data``, ``eval``, ``experiment``, ``kfold``). Missing keys take the module
defaults; unknown keys are an error so a typo never passes silently.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .augment import DEFAULT_RANGES, AugmentPolicy
from .detector import GridConfig
from .distill import KDConfig
from .evaluate import IOU_SWEEP
from .train import TrainConfig

AUGMENT_VARIANTS = ("none", "geometric", "photometric", "geometric+photometric")


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration entries."""


@dataclass(frozen=True)
class DataConfig:
    polyp_seed: int = 0
    edd_seed: int = 1
    unseen_seed: int = 2
    confusion: float = 0.3
    polyp_dir: str | None = None
    edd_dir: str | None = None
    unseen_dir: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.confusion <= 1.0:
            raise ConfigError("data.confusion must lie in [0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple = IOU_SWEEP

    def __post_init__(self):
        if not self.thresholds or not all(0.0 < t <= 1.0 for t in self.thresholds):
            raise ConfigError("eval.thresholds must be a non-empty list in (0, 1]")


@dataclass(frozen=True)
class ExperimentSection:
    seeds: int = 5
    teacher_epochs: int = 60
    student_epochs: int = 60
    teacher_augment: str | None = None  # augmentation variant for the teacher; None keeps train's policy

    def __post_init__(self):
        if self.seeds < 1:
            raise ConfigError("experiment.seeds must be at least 1")
        if self.teacher_augment is not None and self.teacher_augment not in AUGMENT_VARIANTS:
            raise ConfigError(f"experiment.teacher_augment must be one of {AUGMENT_VARIANTS}")
        if self.teacher_epochs < 1 or self.student_epochs < 1:
            raise ConfigError("experiment epochs must be at least 1")


@dataclass(frozen=True)
class KFoldSection:
    k: int = 3
    epochs: int = 20
    seed: int = 0
    variants: tuple = AUGMENT_VARIANTS

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("kfold.k must be at least 2")
        if self.epochs < 1:
            raise ConfigError("kfold.epochs must be at least 1")
        bad = [v for v in self.variants if v not in AUGMENT_VARIANTS]
        if bad or not self.variants:
            raise ConfigError(f"kfold.variants must be drawn from {AUGMENT_VARIANTS}")


_TRAIN_KEYS = ("learning_rate", "momentum", "weight_decay", "epochs", "batch_images",
               "anchors_per_image", "positive_fraction", "seed", "reg_weight", "score_floor", "nms_iou")
_KD_KEYS = ("enabled", "lambda_ndbe", "lambda_neoplasia", "lambda_polyp", "eps_floor", "normalize_over_batch")
_AUGMENT_KEYS = ("geometric", "photometric", "probability", "ranges")
_GRID_KEYS = ("stride", "scales", "ratios")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    eval: EvalConfig = EvalConfig()
    experiment: ExperimentSection = ExperimentSection()
    kfold: KFoldSection = KFoldSection()
    source: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        t = self.train
        return {
            "train": {k: getattr(t, k) for k in _TRAIN_KEYS},
            "kd": {"enabled": t.kd_enabled, **asdict(t.kd)},
            "augment": {"geometric": list(t.augment.geometric), "photometric": list(t.augment.photometric),
                        "probability": t.augment.probability,
                        "ranges": {k: list(v) for k, v in sorted(t.augment.ranges.items())}},
            "grid": {"stride": t.grid.stride, "scales": list(t.grid.scales), "ratios": list(t.grid.ratios)},
            "data": asdict(self.data),
            "eval": {"thresholds": list(self.eval.thresholds)},
            "experiment": asdict(self.experiment),
            "kfold": {**asdict(self.kfold), "variants": list(self.kfold.variants)},
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def write(self, path: str | Path) -> Path:
        """Echo the fully resolved config (defaults applied) to ``path``."""
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_yaml())
        return p

    def with_augment(self, variant: str, seed: int | None = None) -> "ExperimentConfig":
        policy = variant_policy(variant, self.train.augment)
        if seed is not None:
            policy = replace(policy, seed=seed)
        return replace(self, train=replace(self.train, augment=policy))


def variant_policy(variant: str, base: AugmentPolicy = AugmentPolicy()) -> AugmentPolicy:
    """``base`` with its op lists set to the named variant; ranges and probability kept."""
    from .augment import GEOMETRIC_OPS, PHOTOMETRIC_OPS

    if variant not in AUGMENT_VARIANTS:
        raise ConfigError(f"unknown augmentation variant {variant!r}")
    geo = GEOMETRIC_OPS if "geometric" in variant else ()
    pho = PHOTOMETRIC_OPS if "photometric" in variant else ()
    return replace(base, geometric=tuple(geo), photometric=tuple(pho))


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def _section_from(cls, section: str, raw: dict, tuples=()):
    _check_keys(section, raw, [f.name for f in fields(cls)])
    kw = {k: tuple(v) if k in tuples else v for k, v in raw.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def from_dict(raw: dict | None, source: str | None = None) -> ExperimentConfig:
    raw = dict(raw or {})
    _check_keys("<root>", raw, ("train", "kd", "augment", "grid", "data", "eval", "experiment", "kfold"))
    tr = dict(raw.get("train") or {})
    _check_keys("train", tr, _TRAIN_KEYS)
    kd = dict(raw.get("kd") or {})
    _check_keys("kd", kd, _KD_KEYS)
    au = dict(raw.get("augment") or {})
    _check_keys("augment", au, _AUGMENT_KEYS)
    gr = dict(raw.get("grid") or {})
    _check_keys("grid", gr, _GRID_KEYS)
    ranges = dict(au.get("ranges") or {})
    _check_keys("augment.ranges", ranges, DEFAULT_RANGES)
    try:
        kd_enabled = bool(kd.pop("enabled", True))
        kd_cfg = KDConfig(**kd)
        policy = AugmentPolicy(tuple(au.get("geometric", ())), tuple(au.get("photometric", ())),
                               float(au.get("probability", 0.5)),
                               {**DEFAULT_RANGES, **{k: tuple(v) for k, v in ranges.items()}})
        g = GridConfig()
        grid = GridConfig(float(gr.get("stride", g.stride)), tuple(float(s) for s in gr.get("scales", g.scales)),
                          tuple(float(r) for r in gr.get("ratios", g.ratios)), g.frame)
        train = TrainConfig(**tr, kd=kd_cfg, kd_enabled=kd_enabled, augment=policy, grid=grid)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        train=train,
        data=_section_from(DataConfig, "data", dict(raw.get("data") or {})),
        eval=_section_from(EvalConfig, "eval", dict(raw.get("eval") or {}), tuples=("thresholds",)),
        experiment=_section_from(ExperimentSection, "experiment", dict(raw.get("experiment") or {})),
        kfold=_section_from(KFoldSection, "kfold", dict(raw.get("kfold") or {}), tuples=("variants",)),
        source=source,
    )


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a YAML config; ``None`` yields the all-defaults config."""
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from exc
    return from_dict(raw, source=str(p))
