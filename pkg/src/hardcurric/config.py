"""Run configuration: flat key=value files, typed and validated."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

ABLATIONS = ("no_hdir", "no_hind", "fixed_k", "no_retrieval", "raw_retrieval_features")


@dataclass(frozen=True)
class HardnessConfig:
    alpha1: float = 0.6
    alpha2: float = 0.4
    beta: float = 4.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("alpha1" if self.alpha1 < 0 else "alpha2", "weights must be non-negative")
        if self.beta <= 0:
            raise ConfigError("beta", "must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    lr: float = 1e-4
    dropout: float = 0.5
    batch: int = 32
    k: int = 5
    seed: int = 0
    d: int = 32
    tokens: int = 4
    d_r: int = 32
    d_h: int = 64
    no_hdir: bool = False
    no_hind: bool = False
    fixed_k: bool = False
    no_retrieval: bool = False
    raw_retrieval_features: bool = False

    def with_flags(self, *names: str) -> "TrainConfig":
        off = {a: False for a in ABLATIONS}
        off.update({n: True for n in names})
        return replace(self, **off)

    @property
    def ablation(self) -> str:
        on = [a for a in ABLATIONS if getattr(self, a)]
        return "+".join(on) if on else "full"


@dataclass(frozen=True)
class Config:
    """Every key accepted in a config file or as a ``--key value`` flag."""

    # data
    dim_a: int = 64
    dim_t: int = 64
    dim_v: int = 64
    classes: int = 4
    n_train: int = 600
    n_test: int = 200
    rho: float = 0.8
    phi: float = 0.0
    noise: float = 0.5
    hard_noise: float = 3.0
    # model
    d: int = 32
    tokens: int = 4
    d_r: int = 32
    d_h: int = 64
    # hardness
    alpha1: float = 0.6
    alpha2: float = 0.4
    beta: float = 4.0
    # training
    k: int = 5
    epochs: int = 25
    lr: float = 1e-4
    dropout: float = 0.5
    batch: int = 32
    seed: int = 0
    # retrieval metrics
    metric_a: str = "EUCLIDEAN_L2"
    metric_t: str = "INNER_PRODUCT"
    metric_v: str = "EUCLIDEAN_L2"
    # ablations
    no_hdir: bool = False
    no_hind: bool = False
    fixed_k: bool = False
    no_retrieval: bool = False
    raw_retrieval_features: bool = False
    # evaluation
    binary: bool = False
    f1: str = "weighted"
    ablate_seeds: str = "0,1,2,3,4"
    # paths
    out: str = "run"
    data: str = ""

    def __post_init__(self):
        for key in ("dim_a", "dim_t", "dim_v", "d", "tokens", "d_r", "d_h", "k", "epochs", "batch"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.classes < 2:
            raise ConfigError("classes", "must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must lie in [0, 1)")
        if self.lr < 0:
            raise ConfigError("lr", "must be non-negative")
        for key in ("metric_a", "metric_t", "metric_v"):
            if getattr(self, key) not in ("INNER_PRODUCT", "EUCLIDEAN_L2"):
                raise ConfigError(key, f"unknown metric {getattr(self, key)!r}")
        if self.f1 not in ("weighted", "positive"):
            raise ConfigError("f1", "must be 'weighted' or 'positive'")
        HardnessConfig(self.alpha1, self.alpha2, self.beta)

    @property
    def data_dir(self) -> Path:
        return Path(self.data) if self.data else Path(self.out) / "data"

    @property
    def hardness(self) -> HardnessConfig:
        """Hardness weights with the no_hdir / no_hind ablations applied."""
        return HardnessConfig(0.0 if self.no_hdir else self.alpha1, 0.0 if self.no_hind else self.alpha2, self.beta)

    @property
    def train(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{n: getattr(self, n) for n in names})

    @property
    def metrics(self) -> dict:
        return {"a": self.metric_a, "t": self.metric_t, "v": self.metric_v}

    def synth_spec(self):
        from .data import SynthSpec
        return SynthSpec(classes=self.classes, n_train=self.n_train, n_test=self.n_test, dim_a=self.dim_a,
                         dim_t=self.dim_t, dim_v=self.dim_v, rho=self.rho, phi=self.phi, noise=self.noise,
                         hard_noise=self.hard_noise, seed=self.seed)

    def canonical(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def replace(self, **kw) -> "Config":
        return replace(self, **kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, typ, raw: str):
    try:
        if typ == "bool" or typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int" or typ is int:
            return int(raw)
        if typ == "float" or typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ}") from None


def parse_pairs(pairs: dict[str, str], base: Config | None = None) -> Config:
    types = {f.name: f.type for f in fields(Config)}
    values = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _coerce(key, types[key], raw)
    return replace(base or Config(), **values)


def load_config(path, overrides: dict[str, str] | None = None) -> Config:
    from .featstore import read_kv
    cfg = parse_pairs(read_kv(path)) if path else Config()
    return parse_pairs(overrides or {}, cfg)
