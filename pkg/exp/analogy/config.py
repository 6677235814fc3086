from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any, Literal, get_args

from .errors import ConfigError

ModelKind = Literal["analogy", "distmult", "complex", "hole"]
CorruptMode = Literal["subject", "relation", "object"]
SplitName = Literal["train", "valid", "test"]

MODEL_KINDS: tuple[str, ...] = ("analogy", "distmult", "complex", "hole")
CORRUPT_MODES: tuple[str, ...] = ("subject", "relation", "object")
SPLITS: tuple[str, ...] = ("train", "valid", "test")


@dataclass
class ModelConfig:
    model_kind: str = "analogy"
    dim: int = 200
    # n = floor(scalar_frac * m), moved by one if m - n would be odd
    scalar_frac: float = 0.5
    num_scalars: int | None = None
    init_bound: float = 0.01

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}, expected one of {MODEL_KINDS}")
        if self.dim <= 0:
            raise ConfigError(f"embedding dimension must be positive, got {self.dim}")
        if self.model_kind == "complex" and self.dim % 2:
            raise ConfigError(f"complex embeddings need an even dimension, got {self.dim}")
        if not 0.0 <= self.scalar_frac <= 1.0:
            raise ConfigError(f"scalar_frac must lie in [0, 1], got {self.scalar_frac}")
        if self.init_bound <= 0:
            raise ConfigError(f"init_bound must be positive, got {self.init_bound}")
        if self.num_scalars is not None and self.model_kind == "analogy":
            n = self.num_scalars
            if not 0 <= n <= self.dim or (self.dim - n) % 2:
                raise ConfigError(f"analogy layout needs 0 <= n <= m and m - n even, got m={self.dim}, n={n}")

    @property
    def n(self) -> int:
        if self.model_kind == "distmult":
            return self.dim
        if self.model_kind != "analogy":
            return 0
        if self.num_scalars is not None:
            return self.num_scalars
        n = int(self.dim * self.scalar_frac)
        if (self.dim - n) % 2:
            n = n - 1 if n > 0 else n + 1
        return n

    def resolve_scalars(self) -> "ModelConfig":
        """Pin num_scalars to the value derived from scalar_frac."""
        if self.model_kind == "analogy" and self.num_scalars is None:
            self.num_scalars = self.n
        return self


@dataclass
class SamplerConfig:
    neg_ratio: int = 3
    corrupt_modes: tuple[str, ...] = CORRUPT_MODES
    filter_false_negatives: bool = False
    max_filter_redraws: int = 100
    seed: int = 42

    def __post_init__(self):
        self.corrupt_modes = tuple(self.corrupt_modes)
        if self.neg_ratio < 1:
            raise ConfigError(f"neg_ratio must be >= 1, got {self.neg_ratio}")
        if not self.corrupt_modes:
            raise ConfigError("corrupt_modes must not be empty")
        unknown = [m for m in self.corrupt_modes if m not in CORRUPT_MODES]
        if unknown:
            raise ConfigError(f"unknown corrupt modes {unknown}, expected a subset of {CORRUPT_MODES}")


@dataclass
class DataConfig:
    train_path: str | None = None
    valid_path: str | None = None
    test_path: str | None = None
    allow_duplicates: bool = False


@dataclass
class EvalConfig:
    filter_splits: tuple[str, ...] = SPLITS
    hits_at: tuple[int, ...] = (1, 3, 10)
    tie_policy: str = "pessimistic"
    batch_size: int = 256

    def __post_init__(self):
        self.filter_splits = tuple(self.filter_splits)
        self.hits_at = tuple(sorted(int(k) for k in self.hits_at))
        unknown = [s for s in self.filter_splits if s not in SPLITS]
        if unknown:
            raise ConfigError(f"unknown filter splits {unknown}, expected a subset of {SPLITS}")
        if any(k < 1 for k in self.hits_at):
            raise ConfigError(f"hits@k needs k >= 1, got {self.hits_at}")
        if self.tie_policy not in ("pessimistic", "optimistic"):
            raise ConfigError(f"tie_policy must be 'pessimistic' or 'optimistic', got {self.tie_policy!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    lr: float = 0.1
    l2: float = 1e-3
    adagrad_epsilon: float = 1e-8
    epochs: int = 500
    threads: int = 1
    batch_size: int = 1
    seed: int = 42

    checkpoint_interval: int = 50
    checkpoint_dir: str | None = None
    max_checkpoints: int = 3
    resume: bool = False
    eval_interval: int = 0
    log_dir: str | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be non-negative, got {self.l2}")
        if self.adagrad_epsilon <= 0:
            raise ConfigError(f"adagrad_epsilon must be positive, got {self.adagrad_epsilon}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_interval < 0 or self.eval_interval < 0:
            raise ConfigError("checkpoint_interval and eval_interval must be >= 0")
        if self.max_checkpoints < 1:
            raise ConfigError(f"max_checkpoints must be >= 1, got {self.max_checkpoints}")


def to_flat(config: Any, prefix: str = "") -> dict[str, str]:
    flat: dict[str, str] = {}
    for f in fields(config):
        value = getattr(config, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(value):
            flat.update(to_flat(value, prefix=f"{key}."))
        elif isinstance(value, tuple):
            flat[key] = ",".join(str(v) for v in value)
        else:
            flat[key] = repr(value) if isinstance(value, float) else str(value)
    return flat


def _coerce(raw: str, default: Any) -> Any:
    if raw == "None":
        return None
    if isinstance(default, bool):
        if raw not in ("True", "False"):
            raise ConfigError(f"expected True/False, got {raw!r}")
        return raw == "True"
    if isinstance(default, tuple):
        items = [s for s in raw.split(",") if s]
        if default and isinstance(default[0], int):
            return tuple(int(s) for s in items)
        return tuple(items)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def from_flat(flat: dict[str, str], cls: type = TrainConfig, prefix: str = "") -> Any:
    template = cls()
    kwargs: dict[str, Any] = {}
    for f in fields(template):
        key = f"{prefix}{f.name}"
        default = getattr(template, f.name)
        if is_dataclass(default):
            kwargs[f.name] = from_flat(flat, type(default), prefix=f"{key}.")
        elif key in flat:
            raw = flat[key]
            if default is None and raw != "None":
                kwargs[f.name] = int(raw) if int in get_args(f.type) else raw
            else:
                kwargs[f.name] = _coerce(raw, default)
    return cls(**kwargs)
