"""Model and training configuration, stored as flat ``key = value`` TOML."""

import dataclasses
import hashlib
from dataclasses import dataclass, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

VARIANTS = ("full", "sr_features", "sr_volume", "sr_avg")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-scale network."""

    c_emb: int = 252
    k_rstb: int = 3
    l_stl: int = 6
    heads: int = 6
    window: int = 8
    patch: tuple = (2, 2, 2)
    mlp_ratio: float = 2.0
    variant: str = "full"
    share_branch_weights: bool = False

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        self.validate()

    @classmethod
    def toy(cls, **overrides):
        """Desk-scale network used by the gradient and overfit checks."""
        base = dict(c_emb=12, k_rstb=1, l_stl=2, heads=2, window=2, patch=(2, 2, 2), mlp_ratio=2.0)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.c_emb < 1 or self.heads < 1 or self.c_emb % self.heads:
            raise ConfigError(f"c_emb={self.c_emb} must be a positive multiple of heads={self.heads}")
        if self.k_rstb < 1 or self.l_stl < 1:
            raise ConfigError("k_rstb and l_stl must be at least 1")
        if self.window < 2 or self.window % 2:
            raise ConfigError(f"window={self.window} must be even and >= 2")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ConfigError(f"patch must be three positive ints, got {self.patch}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def hidden(self):
        return int(round(self.c_emb * self.mlp_ratio))

    def input_multiple(self):
        """Per-axis divisor every input size must satisfy."""
        return tuple(p * self.window for p in self.patch)

    def check_input(self, dims):
        mult = self.input_multiple()
        if len(dims) != 3 or any(n % m for n, m in zip(dims, mult)):
            raise ConfigError(
                f"input dims {tuple(dims)} must be multiples of patch*window = {mult} per axis"
            )

    def hash(self):
        return hashlib.sha256(to_text(self).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 4
    iterations: int = 55000
    seed: int = 0
    crop: int = 32
    checkpoint_interval: int = 1000
    eval_interval: int = 1000
    factors: tuple = (2, 2, 1)
    grad_clip: float = 0.0  # 0 disables clipping
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "factors", tuple(int(f) for f in self.factors))
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch < 1:
            raise ConfigError("batch must be at least 1")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two numbers in [0, 1), got {self.betas}")
        if self.eps <= 0 or self.iterations < 0 or self.crop < 1:
            raise ConfigError("eps must be positive, iterations >= 0, crop >= 1")
        if self.checkpoint_interval < 1 or self.eval_interval < 1:
            raise ConfigError("checkpoint_interval and eval_interval must be at least 1")
        if len(self.factors) != 3 or min(self.factors) < 1:
            raise ConfigError(f"factors must be three positive ints, got {self.factors}")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    return str(value)


def to_text(cfg):
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def _coerce(cls, name, value):
    default = next(f for f in fields(cls) if f.name == name).default
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        elem = int if isinstance(default[0], int) else (int, float)
        ok = (
            isinstance(value, list)
            and len(value) == len(default)
            and all(isinstance(v, elem) and not isinstance(v, bool) for v in value)
        )
        value = tuple(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{cls.__name__}.{name}: bad value {value!r}")
    return value


def from_mapping(cls, mapping):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    return cls(**{k: _coerce(cls, k, v) for k, v in mapping.items()})


def from_text(cls, text):
    try:
        mapping = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {cls.__name__} text: {exc}") from None
    return from_mapping(cls, mapping)


def load_config(cls, path):
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_text(cls, text)


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_text(cfg))


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)

