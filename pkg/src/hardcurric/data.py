"""Samples, missing-modality conditions, dataset I/O and the synthetic generator."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .encoders import MODALITIES
from .errors import ConfigError, DomainError, IntegrityError, read_text
from .featstore import read_labels, read_matrix, write_kv, write_labels, write_matrix, read_kv
from .numkit import Rng

# the six test-time settings, in report order
CONDITIONS = ("a", "v", "t", "at", "av", "tv")
FULL = "atv"


def check_condition(condition: str) -> str:
    if condition != FULL and condition not in CONDITIONS:
        raise DomainError(f"unknown condition {condition!r}")
    return condition


def available(condition: str) -> tuple[str, ...]:
    """Modalities present under ``condition``, in canonical a, t, v order."""
    check_condition(condition)
    return tuple(m for m in MODALITIES if m in condition)


def missing(condition: str) -> tuple[str, ...]:
    check_condition(condition)
    return tuple(m for m in MODALITIES if m not in condition)


@dataclass
class ModalitySample:
    id: int
    features: dict  # modality -> raw vector, or None when missing
    label: int

    @property
    def condition(self) -> str:
        return "".join(m for m in MODALITIES if self.features.get(m) is not None)

    def masked(self, condition: str) -> "ModalitySample":
        keep = available(condition)
        return ModalitySample(self.id, {m: (self.features[m] if m in keep else None) for m in MODALITIES},
                              self.label)


@dataclass
class Dataset:
    """Row-aligned raw features (float64) with labels and optional hard-sample tags."""

    features: dict
    labels: np.ndarray
    hard: np.ndarray | None = None

    def __post_init__(self):
        self.features = {m: np.asarray(self.features[m], dtype=np.float64) for m in MODALITIES}
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        if any(f.shape[0] != n for f in self.features.values()):
            raise IntegrityError("modality matrices and labels have different row counts")
        if self.hard is None:
            self.hard = np.zeros(n, dtype=bool)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dims(self) -> dict:
        return {m: self.features[m].shape[1] for m in MODALITIES}

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def sample(self, i: int) -> ModalitySample:
        return ModalitySample(i, {m: self.features[m][i] for m in MODALITIES}, int(self.labels[i]))

    def subset(self, ids) -> "Dataset":
        ids = np.asarray(ids, dtype=np.int64)
        return Dataset({m: self.features[m][ids] for m in MODALITIES}, self.labels[ids], self.hard[ids])

    def masked_batch(self, ids, conditions) -> dict:
        """Raw features for ``ids`` with missing modalities zeroed per row condition."""
        ids = np.asarray(ids, dtype=np.int64)
        out = {}
        for m in MODALITIES:
            keep = np.array([m in c for c in conditions], dtype=np.float64)
            out[m] = self.features[m][ids] * keep[:, None]
        return out


def write_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for m in MODALITIES:
        write_matrix(d / f"{m}.hmf", ds.features[m])
    write_labels(d / "labels.hml", ds.labels)
    (d / "hard.txt").write_text("".join(f"{i}\n" for i in np.flatnonzero(ds.hard)))


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    feats = {m: read_matrix(d / f"{m}.hmf").astype(np.float64) for m in MODALITIES}
    labels = read_labels(d / "labels.hml")
    hard = np.zeros(labels.shape[0], dtype=bool)
    sidecar = d / "hard.txt"
    if sidecar.exists():
        try:
            hard[[int(x) for x in read_text(sidecar).split()]] = True
        except (ValueError, IndexError):
            raise IntegrityError(f"{sidecar}: bad hard-sample ids") from None
    return Dataset(feats, labels, hard)


# ------------------------------------------------------------ synthetic


@dataclass
class SynthSpec:
    classes: int = 4
    n_train: int = 600
    n_test: int = 200
    dim_a: int = 64
    dim_t: int = 64
    dim_v: int = 64
    latent: int = 8
    rho: float = 0.8          # cross-modal correlation of within-class latent noise
    phi: float = 0.0          # probability that a sample is hard
    separation: float = 1.0   # std of class means in latent space
    spread: float = 0.6       # within-class latent std
    noise: float = 0.5        # observation noise std
    hard_noise: float = 3.0   # noise multiplier for hard samples
    # per-modality signal strength; unequal so that single-modality conditions differ in difficulty
    gain_a: float = 0.8
    gain_t: float = 1.0
    gain_v: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError("classes", "need at least 2 classes")
        for key in ("dim_a", "dim_t", "dim_v", "latent"):
            if getattr(self, key) < 4:
                raise ConfigError(key, "dimension must be >= 4")
        for key in ("n_train", "n_test"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "split must be non-empty")
        for key in ("rho", "phi"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(key, "must lie in [0, 1]")
        for key in ("separation", "spread", "noise", "hard_noise", "gain_a", "gain_t", "gain_v"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be non-negative")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def synth_split(spec: SynthSpec, n: int, rng: Rng, means: np.ndarray, maps: dict) -> Dataset:
    labels = rng.integers(spec.classes, n)
    hard = rng.uniform(n) < spec.phi
    shared = rng.normal((n, spec.latent))
    dims = {"a": spec.dim_a, "t": spec.dim_t, "v": spec.dim_v}
    feats = {}
    for m in MODALITIES:
        own = rng.normal((n, spec.latent))
        eps = spec.rho * shared + np.sqrt(1.0 - spec.rho ** 2) * own
        # hard samples: each view sees an independently drawn class
        lab_m = np.where(hard, rng.integers(spec.classes, n), labels)
        z = means[lab_m] + spec.spread * eps
        noise_scale = spec.noise * np.where(hard, spec.hard_noise, 1.0)[:, None]
        A, b = maps[m]
        gain = getattr(spec, f"gain_{m}")
        view = gain * (z @ A) + b + noise_scale * rng.normal((n, dims[m]))
        feats[m] = view.astype(np.float32).astype(np.float64)  # on-disk precision
    return Dataset(feats, labels, hard)


def synth_data(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    """Class-conditional latent per sample, three noisy affine views of it.

    A hard sample draws each modality's latent from an independently chosen
    class (weak cross-modal agreement) and gets amplified noise.
    """
    spec.validate()
    rng = Rng(spec.seed).child("synth")
    means = spec.separation * rng.child("means").normal((spec.classes, spec.latent))
    dims = {"a": spec.dim_a, "t": spec.dim_t, "v": spec.dim_v}
    maps = {}
    for m in MODALITIES:
        r = rng.child(f"map.{m}")
        maps[m] = (r.normal((spec.latent, dims[m])) / np.sqrt(spec.latent), 0.1 * r.normal(dims[m]))
    train = synth_split(spec, spec.n_train, rng.child("train"), means, maps)
    test = synth_split(spec, spec.n_test, rng.child("test"), means, maps)
    return train, test


def write_synth(spec: SynthSpec, directory) -> tuple[Dataset, Dataset]:
    train, test = synth_data(spec)
    d = Path(directory)
    write_dataset(train, d / "train")
    write_dataset(test, d / "test")
    write_kv(d / "synth.txt", spec.as_dict())
    return train, test


def read_synth_spec(directory) -> SynthSpec:
    raw = read_kv(Path(directory) / "synth.txt")
    spec = SynthSpec()
    for f in fields(spec):
        if f.name in raw:
            setattr(spec, f.name, type(getattr(spec, f.name))(raw[f.name]))
    return spec
