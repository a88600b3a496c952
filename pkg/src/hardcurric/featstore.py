"""Per-modality feature databases, their on-disk format, and exact flat indices.

File layout (all integers little-endian u32, floats little-endian f32):

    <m>.hmf      b"HMF1" version rows dim  payload[rows*dim]
    labels.hml   b"HML1" count            ids[count]
    manifest.txt key=value lines
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import MODALITIES
from .errors import DegenerateInputError, FormatError, IntegrityError, ShapeError, read_text

HMF_MAGIC = b"HMF1"
HML_MAGIC = b"HML1"
VERSION = 1


class Metric(str, enum.Enum):
    INNER_PRODUCT = "INNER_PRODUCT"
    EUCLIDEAN_L2 = "EUCLIDEAN_L2"


DEFAULT_METRICS = {"a": Metric.EUCLIDEAN_L2, "t": Metric.INNER_PRODUCT, "v": Metric.EUCLIDEAN_L2}


# ------------------------------------------------------------ raw files


def write_matrix(path, matrix) -> None:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2:
        raise ShapeError(f"write_matrix expects a 2-D array, got {mat.shape}")
    with open(path, "wb") as fh:
        fh.write(HMF_MAGIC + struct.pack("<III", VERSION, *mat.shape))
        fh.write(mat.tobytes())


def read_matrix(path) -> np.ndarray:
    """Read an HMF1 file; returns the float32 payload as stored."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise IntegrityError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != HMF_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, rows, dim = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * rows * dim
    if len(raw) != expected:
        raise IntegrityError(f"{path}: expected {expected} bytes for {rows}x{dim}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, dim).astype(np.float32)


def write_labels(path, labels) -> None:
    lab = np.ascontiguousarray(labels, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(HML_MAGIC + struct.pack("<I", lab.size))
        fh.write(lab.tobytes())


def read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IntegrityError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != HML_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    if len(raw) != 8 + 4 * count:
        raise IntegrityError(f"{path}: expected {count} labels, found {(len(raw) - 8) / 4:g}")
    return np.frombuffer(raw, dtype="<u4", offset=8).astype(np.int64)


def write_kv(path, items: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def read_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(read_text(path).splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------- store


@dataclass
class FeatureStore:
    """Three row-aligned modality matrices (float32 payload) plus labels."""

    features: dict[str, np.ndarray]
    labels: np.ndarray
    metrics: dict[str, Metric] = field(default_factory=lambda: dict(DEFAULT_METRICS))
    seed: int = 0

    def __post_init__(self):
        self.features = {m: np.asarray(self.features[m], dtype=np.float32) for m in MODALITIES}
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.metrics = {m: Metric(self.metrics[m]) for m in MODALITIES}
        rows = {m: f.shape[0] for m, f in self.features.items()}
        if len(set(rows.values())) != 1 or self.labels.shape[0] != rows["a"]:
            raise IntegrityError(f"store rows disagree: {rows}, labels={self.labels.shape[0]}")

    def __len__(self):
        return self.labels.shape[0]

    def matrix(self, m: str) -> np.ndarray:
        """Modality features widened to float64."""
        return self.features[m].astype(np.float64)

    def manifest(self) -> dict:
        out = {"version": VERSION, "rows": len(self)}
        out.update({f"dim_{m}": self.features[m].shape[1] for m in MODALITIES})
        out.update({f"metric_{m}": self.metrics[m].value for m in MODALITIES})
        out["seed"] = self.seed
        return out


def write_store(store: FeatureStore, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for m in MODALITIES:
        write_matrix(d / f"{m}.hmf", store.features[m])
    write_labels(d / "labels.hml", store.labels)
    write_kv(d / "manifest.txt", store.manifest())


def read_store(directory) -> FeatureStore:
    d = Path(directory)
    try:
        man = read_kv(d / "manifest.txt")
    except FileNotFoundError:
        raise IntegrityError(f"{d}: manifest.txt missing") from None
    try:
        if int(man.get("version", -1)) != VERSION:
            raise FormatError(f"{d}/manifest.txt: unsupported version {man.get('version')}")
        rows = int(man["rows"])
        dims = {m: int(man[f"dim_{m}"]) for m in MODALITIES}
        metrics = {m: Metric(man[f"metric_{m}"]) for m in MODALITIES}
        seed = int(man.get("seed", 0))
    except KeyError as e:
        raise IntegrityError(f"{d}/manifest.txt: missing field {e.args[0]}") from None
    except ValueError as e:
        raise IntegrityError(f"{d}/manifest.txt: {e}") from None
    feats = {}
    for m in MODALITIES:
        mat = read_matrix(d / f"{m}.hmf")
        if mat.shape[0] != rows:
            raise IntegrityError(f"manifest field rows={rows} but {m}.hmf has {mat.shape[0]} rows")
        if mat.shape[1] != dims[m]:
            raise IntegrityError(f"manifest field dim_{m}={dims[m]} but {m}.hmf has dim {mat.shape[1]}")
        feats[m] = mat
    labels = read_labels(d / "labels.hml")
    if labels.shape[0] != rows:
        raise IntegrityError(f"manifest field rows={rows} but labels.hml has {labels.shape[0]} entries")
    return FeatureStore(feats, labels, metrics, seed)


# ---------------------------------------------------------------- index


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = math.sqrt(float(np.dot(v, v)))
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / norm


@dataclass(frozen=True)
class FlatIndex:
    metric: Metric
    rows: np.ndarray
    flagged: tuple = ()  # ids whose zero rows were replaced by the uniform unit vector

    def __len__(self):
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def build_index(matrix, metric: Metric | str, zero_rows: str = "error") -> FlatIndex:
    """Exact index over all rows; inner-product rows are stored L2-normalized.

    ``zero_rows="uniform"`` indexes zero rows as the uniform unit vector and
    records them in ``flagged`` instead of raising.
    """
    metric = Metric(metric)
    rows = np.array(matrix, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ShapeError(f"build_index needs an N x d matrix with N >= 1, got {rows.shape}")
    flagged = []
    if metric is Metric.INNER_PRODUCT:
        for i in range(rows.shape[0]):
            if not rows[i].any():
                if zero_rows != "uniform":
                    raise DegenerateInputError(f"row {i} is a zero vector; cannot index it by inner product")
                rows[i] = 1.0 / math.sqrt(rows.shape[1])
                flagged.append(i)
            else:
                rows[i] = normalize(rows[i])
    rows.setflags(write=False)
    return FlatIndex(metric, rows, tuple(flagged))


def scores(index: FlatIndex, query) -> np.ndarray:
    """Raw per-row scores: cosine for inner product, squared L2 distance otherwise."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ShapeError(f"query has shape {q.shape}, index width is {index.dim}")
    # elementwise product + row sum rather than BLAS: every row is reduced in the
    # same order, so identical rows get bit-identical scores and ties stay exact
    if index.metric is Metric.INNER_PRODUCT:
        return (index.rows * normalize(q)).sum(axis=1)
    diff = index.rows - q
    return (diff * diff).sum(axis=1)


def topk(index: FlatIndex, query, k: int) -> list[tuple[int, float]]:
    """Best ``min(k, N)`` rows, ties broken by ascending id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    s = scores(index, query)
    key = -s if index.metric is Metric.INNER_PRODUCT else s
    order = np.argsort(key, kind="stable")[:k]
    return [(int(i), float(s[i])) for i in order]
