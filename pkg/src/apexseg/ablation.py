"""Declarative ablation configurations and the experiment grid."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import read_key_value, write_key_value
from .mixing import (CROSS_ATTENTION, CROSS_ATTENTION_PER_LEVEL, IDENTITY, KINDS, MEAN, SUM, SUM_2WAY)
from .model import (ANA_IN, ANA_IN_AUX, BASELINE, INCORPORATIONS, MULTITASK, NO_SHARING, PRETRAIN,
                    SHARED_BACKBONE, SHARED_PIXELDECODER, SHARINGS, ModelConfig, SegModel)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AblationConfig:
    """One experiment: model variant, training schedule, data knob, seed and fold."""

    label: str = "baseline"
    incorporation: str = BASELINE
    sharing: str = NO_SHARING
    mixing: str = IDENTITY
    gamma: float | None = None
    seed: int = 0
    fold: int = 0
    folds: int = 5
    rho: float = 0.95
    # optimisation
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 8
    weight_decay: float = 0.0
    pretrain_epochs: int | None = None
    branch_weight: float = 1.0
    deep_supervision: bool = True
    # model size
    d: int = 16
    num_queries: int = 20
    num_layers: int = 6
    rounds: int = 2

    def __post_init__(self):
        validate(self)

    @property
    def dual_head(self) -> bool:
        return self.sharing != NO_SHARING

    @property
    def conditioning(self) -> bool:
        """Anatomy used as a conditioning signal (pre-training or input)."""
        return self.incorporation in (PRETRAIN, ANA_IN, ANA_IN_AUX)

    @property
    def anatomy_prediction(self) -> bool:
        """Anatomy predicted alongside pathology (auxiliary task)."""
        return self.incorporation in (MULTITASK, ANA_IN_AUX) or self.dual_head

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, num_queries=self.num_queries, num_layers=self.num_layers, rounds=self.rounds)

    def replace(self, **kw) -> "AblationConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ablation keys: {sorted(unknown)}")
        return cls(**d)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(AblationConfig)}


def _coerce(name: str, raw: str):
    t = str(_FIELD_TYPES[name])
    raw = raw.strip()
    if raw.lower() in ("none", "") and "None" in t:
        return None
    if raw == "":
        raise ConfigError(f"{name} may not be empty")
    if t.startswith("bool"):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    return raw


def load_config(path: str | Path, **overrides) -> AblationConfig:
    """Read an ``[ablation]`` key-value file; ``overrides`` win over file values."""
    raw = read_key_value(path, "ablation")
    unknown = set(raw) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"{path}: unknown ablation keys {sorted(unknown)}")
    values = {k: _coerce(k, v) for k, v in raw.items()}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return AblationConfig(**values)


def save_config(cfg: AblationConfig, path: str | Path) -> None:
    write_key_value(path, "ablation", {k: ("none" if v is None else v) for k, v in cfg.to_dict().items()})


def validate(cfg: AblationConfig) -> None:
    """Raise :class:`ConfigError` for combinations outside the ablation design."""
    if cfg.incorporation not in INCORPORATIONS:
        raise ConfigError(f"unknown incorporation {cfg.incorporation!r}; expected one of {INCORPORATIONS}")
    if cfg.sharing not in SHARINGS:
        raise ConfigError(f"unknown sharing {cfg.sharing!r}; expected one of {SHARINGS}")
    if cfg.mixing not in KINDS:
        raise ConfigError(f"unknown mixing {cfg.mixing!r}; expected one of {KINDS}")
    if cfg.sharing != NO_SHARING and cfg.incorporation != BASELINE:
        raise ConfigError("dual-head sharing extends the baseline: incorporation must be 'baseline' when sharing is set")
    if cfg.incorporation in (MULTITASK, ANA_IN_AUX):
        if cfg.sharing != NO_SHARING:
            raise ConfigError("multitask predicts with a single head and forbids dual heads (sharing must be 'none')")
        if cfg.gamma is None or cfg.gamma <= 0:
            raise ConfigError(f"{cfg.incorporation} needs a positive gamma, got {cfg.gamma}")
    elif cfg.gamma is not None:
        raise ConfigError(f"gamma only applies to multitask rows, got gamma={cfg.gamma} for {cfg.incorporation}")
    if cfg.mixing != IDENTITY and cfg.sharing != SHARED_PIXELDECODER:
        raise ConfigError("query mixing extends '+Shared PD': mixing other than identity requires "
                          "sharing = 'shared_pixeldecoder'")
    if not 0.0 <= cfg.rho <= 1.0:
        raise ConfigError(f"rho must lie in [0, 1], got {cfg.rho}")
    if cfg.folds < 2 or not 0 <= cfg.fold < cfg.folds:
        raise ConfigError(f"fold {cfg.fold} outside 0..{cfg.folds - 1} (folds={cfg.folds}, need >= 2)")
    if cfg.epochs < 0 or cfg.batch_size < 1 or cfg.lr <= 0:
        raise ConfigError("epochs must be >= 0, batch_size >= 1 and lr > 0")
    if cfg.d % 4:
        raise ConfigError(f"d must be divisible by 4, got {cfg.d}")


def build_model(cfg: AblationConfig, num_anatomy: int, num_pathology: int,
                rng: np.random.Generator | None = None) -> SegModel:
    validate(cfg)
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 1])
    return SegModel(cfg.incorporation, num_anatomy, num_pathology, cfg.sharing, cfg.mixing, cfg.model_config(), rng)


# ---------------------------------------------------------------------------
# the grid

# (key, table method, incorporation, sharing, mixing, gamma); gamma "A" means the anatomy class count
ROWS: tuple[tuple[str, str, str, str, str, object], ...] = (
    ("baseline", "Baseline", BASELINE, NO_SHARING, IDENTITY, None),
    ("pretrain", "Pretrain", PRETRAIN, NO_SHARING, IDENTITY, None),
    ("multitask_g1", "Multitask", MULTITASK, NO_SHARING, IDENTITY, 1.0),
    ("multitask_g10", "Multitask", MULTITASK, NO_SHARING, IDENTITY, 10.0),
    ("multitask_gA", "Multitask", MULTITASK, NO_SHARING, IDENTITY, "A"),
    ("ana_in", "Ana In", ANA_IN, NO_SHARING, IDENTITY, None),
    ("ana_in_aux", "Ana In", ANA_IN_AUX, NO_SHARING, IDENTITY, 1.0),
    ("shared_bb", "+Shared BB", BASELINE, SHARED_BACKBONE, IDENTITY, None),
    ("shared_pd", "+Shared PD", BASELINE, SHARED_PIXELDECODER, IDENTITY, None),
    ("query_sum", "Query Sum", BASELINE, SHARED_PIXELDECODER, SUM, None),
    ("query_sum_2way", "Query Sum 2-ways", BASELINE, SHARED_PIXELDECODER, SUM_2WAY, None),
    ("query_mean", "Query Mean", BASELINE, SHARED_PIXELDECODER, MEAN, None),
    ("ca", "Cross Attention (CA)", BASELINE, SHARED_PIXELDECODER, CROSS_ATTENTION, None),
    ("ca_per_level", "CA per feature level", BASELINE, SHARED_PIXELDECODER, CROSS_ATTENTION_PER_LEVEL, None),
)

ROW_KEYS = tuple(r[0] for r in ROWS)
FLAGSHIP = "ca"


def row_method(key: str) -> str:
    for row in ROWS:
        if row[0] == key:
            return row[1]
    raise KeyError(f"unknown ablation row {key!r}")


def row_config(key: str, num_anatomy: int = 6, **kw) -> AblationConfig:
    for name, _, inc, sharing, mixing, gamma in ROWS:
        if name == key:
            g = float(num_anatomy) if gamma == "A" else gamma
            return AblationConfig(label=name, incorporation=inc, sharing=sharing, mixing=mixing, gamma=g, **kw)
    raise KeyError(f"unknown ablation row {key!r}; expected one of {ROW_KEYS}")


def grid(num_anatomy: int = 6, folds: int = 5, seeds: tuple[int, ...] = (0,), **kw) -> list[AblationConfig]:
    """Every row x seed x fold, rows in table order."""
    return [row_config(label, num_anatomy, seed=s, fold=f, folds=folds, **kw)
            for label in ROW_KEYS for s in seeds for f in range(folds)]
