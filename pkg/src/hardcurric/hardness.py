"""Per-sample learning hardness from reconstruction error and cross-modal mutual information."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, astuple
from typing import Mapping

import numpy as np

from . import encoders as E
from . import numkit as nk
from .checkpoint import load, save
from .config import HardnessConfig, TrainConfig
from .data import CONDITIONS, FULL, Dataset, available
from .encoders import MODALITIES
from .errors import ContractError, IntegrityError, ShapeError, read_text
from .numkit import Tensor

log = logging.getLogger(__name__)

H_MIN, H_MAX = 1e-9, 1.0 - 1e-9

INIT, STAGE1, FROZEN = "INIT", "STAGE1", "FROZEN"


# ------------------------------------------------------------- algebra


def direct_hardness(x_true: Mapping[str, np.ndarray], x_hat: Mapping[str, np.ndarray]):
    """Per-modality reconstruction MSE and their sum. Plain arrays, no graph."""
    per = {}
    for m in MODALITIES:
        x, xh = np.asarray(x_true[m], dtype=np.float64), np.asarray(x_hat[m], dtype=np.float64)
        if x.shape != xh.shape:
            raise ShapeError(f"direct_hardness[{m}]: {x.shape} vs {xh.shape}")
        per[m] = float(np.mean((xh - x) ** 2))
    return per, per["a"] + per["t"] + per["v"]


def feature_entropy(f) -> Tensor:
    """Shannon entropy of softmax(f) over the last axis, one value per vector.

    Uses H = logsumexp(f) - <softmax(f), f>, with logsumexp recovered as
    cross_entropy(f, 0) + f[0] so only closed-set ops appear.
    """
    f = nk.as_tensor(f)
    d = f.shape[-1]
    batch = f.shape[:-1]
    lse_minus_f0 = nk.cross_entropy(f, np.zeros(batch, dtype=np.int64), reduction="none")
    e0 = np.zeros((d, 1))
    e0[0, 0] = 1.0
    f0 = nk.reshape(nk.matmul(f, e0), batch)
    p = nk.softmax(f)
    pf = nk.reshape(nk.matmul(nk.reshape(p, (*batch, 1, d)), nk.reshape(f, (*batch, d, 1))), batch)
    return nk.add(nk.add(lse_minus_f0, f0), nk.scale(pf, -1.0))


def mutual_information(f_p, f_q, P: Mapping[str, Tensor]) -> Tensor:
    """H(pool f_p) + H(pool f_q) - H(pool fuse(f_p, f_q)); a proxy that can go negative."""
    joint = E.fuse_pair(f_p, f_q, P)
    return nk.add(nk.add(feature_entropy(E.pool(f_p)), feature_entropy(E.pool(f_q))),
                  nk.scale(feature_entropy(E.pool(joint)), -1.0))


def indirect_hardness(f_a, f_t, f_v, P: Mapping[str, Tensor]) -> Tensor:
    return nk.add(nk.add(mutual_information(f_a, f_t, P), mutual_information(f_a, f_v, P)),
                  mutual_information(f_t, f_v, P))


def unified_hardness(h_dir: float, h_ind: float, cfg: HardnessConfig = HardnessConfig(),
                     clamp: bool = True) -> float:
    """Scaled logistic of the weighted hardness components, clamped into (0, 1)."""
    z = cfg.beta * (cfg.alpha1 * h_dir + cfg.alpha2 * h_ind)
    if z >= 0:
        h = 1.0 / (1.0 + math.exp(-z))
    else:
        e = math.exp(z)
        h = e / (1.0 + e)
    return min(max(h, H_MIN), H_MAX) if clamp else h


# -------------------------------------------------------------- module


@dataclass
class HardnessModule:
    params: dict
    dims: dict
    n_classes: int
    stage: str = INIT
    history: dict = field(default_factory=dict)

    @classmethod
    def create(cls, dims: Mapping[str, int], n_classes: int, cfg: TrainConfig, rng: nk.Rng) -> "HardnessModule":
        params = {}
        params.update(E.init_encoders(rng.child("enc"), dims, cfg.d, cfg.tokens))
        params.update(E.init_fusion(rng.child("fuse"), cfg.d))
        params.update(E.init_heads(rng.child("cls"), cfg.d, n_classes))
        params.update(E.init_linear_reconstructors(rng.child("rec"), dims, cfg.d))
        return cls(params, dict(dims), n_classes)

    def save(self, path) -> None:
        meta = {"kind": "hardness", "stage": self.stage, "classes": self.n_classes}
        meta.update({f"dim_{m}": self.dims[m] for m in MODALITIES})
        save(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "HardnessModule":
        params, meta = load(path)
        if meta.get("kind") != "hardness":
            raise ContractError(f"{path} is not a hardness checkpoint")
        dims = {m: int(meta[f"dim_{m}"]) for m in MODALITIES}
        return cls(params, dims, int(meta["classes"]), meta["stage"])


def _encode_all(P, x: Mapping[str, np.ndarray], training, rng, dropout):
    return {m: E.encode(x[m], m, P, training, rng, dropout) for m in MODALITIES}


def stage1_loss(P: Mapping[str, Tensor], x: Mapping[str, np.ndarray], y: np.ndarray,
                training: bool = False, rng: nk.Rng | None = None, dropout: float = 0.5):
    """Sum of per-modality CE minus the batch-mean indirect hardness.

    Returns ``(loss, ce_sum)`` as tensors.
    """
    f = _encode_all(P, x, training, rng, dropout)
    ce = None
    for m in MODALITIES:
        term = nk.cross_entropy(E.classify(E.pool(f[m]), P, f"cls.{m}"), y)
        ce = term if ce is None else nk.add(ce, term)
    h_ind = indirect_hardness(f["a"], f["t"], f["v"], P)
    return nk.add(ce, nk.scale(nk.mean(h_ind, axis=0), -1.0)), ce


def stage2_loss(P: Mapping[str, Tensor], x_masked: Mapping[str, np.ndarray], x_true: Mapping[str, np.ndarray],
                y: np.ndarray, training: bool = False, rng: nk.Rng | None = None, dropout: float = 0.5):
    """Joint-head CE plus batch-mean direct hardness; returns ``(loss, h_dir)``."""
    f = _encode_all(P, x_masked, training, rng, dropout)
    pooled = {m: E.pool(f[m]) for m in MODALITIES}
    ce = nk.cross_entropy(E.classify(E.joint_features(pooled), P, "cls.joint"), y)
    rec = E.reconstruct_linear(pooled["a"], pooled["t"], pooled["v"], P)
    h_dir = None
    for m in MODALITIES:
        term = nk.mse(x_true[m], rec[m])
        h_dir = term if h_dir is None else nk.add(h_dir, term)
    return nk.add(ce, h_dir), h_dir


def minibatches(n: int, size: int, rng: nk.Rng):
    order = rng.permutation(n)
    for s in range(0, n, size):
        yield order[s:s + size]


def _require_complete(ds: Dataset):
    for m in MODALITIES:
        bad = ~np.all(np.isfinite(ds.features[m]), axis=1)
        if bad.any():
            raise ContractError(f"stage-1 training needs complete samples; sample {int(np.flatnonzero(bad)[0])} "
                                f"is missing modality {m}")


STAGE1_TRAINABLE = lambda name: name.startswith(("enc.", "fuse.", "cls.a.", "cls.t.", "cls.v."))
STAGE2_TRAINABLE = lambda name: name.startswith(("enc.", "rec.", "cls.joint."))


def train_hardness_stage1(module: HardnessModule, train: Dataset, cfg: TrainConfig) -> HardnessModule:
    """Fit encoders, fusion and per-modality heads on complete samples."""
    if module.stage != INIT:
        raise ContractError(f"stage 1 expects an INIT module, got {module.stage}")
    _require_complete(train)
    rng = nk.Rng(cfg.seed).child("hardness.stage1")
    names = [k for k in module.params if STAGE1_TRAINABLE(k)]
    state = nk.AdamState(lr=cfg.lr)
    params = dict(module.params)
    trace, ce_trace = [], []
    for epoch in range(cfg.epochs):
        er = rng.child(f"epoch{epoch}")
        total = ce_total = 0.0
        drop = er.child("dropout")
        for ids in minibatches(len(train), cfg.batch, er.child("order")):
            x = {m: train.features[m][ids] for m in MODALITIES}
            lv = nk.leaves(params, names)
            loss, ce = stage1_loss(lv, x, train.labels[ids], True, drop, cfg.dropout)
            grads = nk.backward(loss, {k: lv[k] for k in names})
            params = nk.adam_step(state, params, grads)
            total += loss.item() * len(ids)
            ce_total += ce.item() * len(ids)
        trace.append(total / len(train))
        ce_trace.append(ce_total / len(train))
        log.info("hardness stage1 epoch %d loss %.6f ce %.6f", epoch + 1, trace[-1], ce_trace[-1])
    module.params = params
    module.stage = STAGE1
    module.history["stage1_loss"] = trace
    module.history["stage1_ce"] = ce_trace
    return module


def draw_conditions(n: int, rng: nk.Rng) -> list[str]:
    """Uniform draw over the six missing-modality settings, one per sample."""
    return [CONDITIONS[i] for i in rng.integers(len(CONDITIONS), n)]


def train_hardness_stage2(module: HardnessModule, train: Dataset, cfg: TrainConfig) -> HardnessModule:
    """Fine-tune encoders and fit reconstructors + joint head on masked samples, then freeze."""
    if module.stage != STAGE1:
        raise ContractError(f"stage 2 needs a stage-1 module, got {module.stage}")
    rng = nk.Rng(cfg.seed).child("hardness.stage2")
    names = [k for k in module.params if STAGE2_TRAINABLE(k)]
    state = nk.AdamState(lr=cfg.lr)
    params = dict(module.params)
    trace, rec_trace = [], []
    for epoch in range(cfg.epochs):
        er = rng.child(f"epoch{epoch}")
        conds = draw_conditions(len(train), er.child("conditions"))
        total = rec_total = 0.0
        drop = er.child("dropout")
        for ids in minibatches(len(train), cfg.batch, er.child("order")):
            x_true = {m: train.features[m][ids] for m in MODALITIES}
            x_masked = train.masked_batch(ids, [conds[i] for i in ids])
            lv = nk.leaves(params, names)
            loss, h_dir = stage2_loss(lv, x_masked, x_true, train.labels[ids], True, drop,
                                      cfg.dropout)
            grads = nk.backward(loss, {k: lv[k] for k in names})
            params = nk.adam_step(state, params, grads)
            total += loss.item() * len(ids)
            rec_total += h_dir.item() * len(ids)
        trace.append(total / len(train))
        rec_trace.append(rec_total / len(train))
        log.info("hardness stage2 epoch %d loss %.6f h_dir %.6f", epoch + 1, trace[-1], rec_trace[-1])
    module.params = params
    module.stage = FROZEN
    module.history["stage2_loss"] = trace
    module.history["stage2_hdir"] = rec_trace
    return module


def train_hardness(train: Dataset, cfg: TrainConfig) -> HardnessModule:
    module = HardnessModule.create(train.dims, train.n_classes, cfg, nk.Rng(cfg.seed).child("hardness.init"))
    train_hardness_stage1(module, train, cfg)
    return train_hardness_stage2(module, train, cfg)


# ------------------------------------------------------------- scoring


@dataclass(frozen=True)
class HardnessRecord:
    id: int
    condition: str
    h_dir_a: float
    h_dir_t: float
    h_dir_v: float
    h_dir: float
    h_ind: float
    h: float

    def recompute(self, cfg: HardnessConfig) -> float:
        return unified_hardness(self.h_dir, self.h_ind, cfg)


def score_batch(module: HardnessModule, ds: Dataset, ids, conditions, cfg: HardnessConfig = HardnessConfig()):
    """Hardness records for ``ids`` under their conditions (evaluation mode, no gradients)."""
    if module.stage != FROZEN:
        raise ContractError(f"hardness module is not frozen (stage {module.stage})")
    ids = np.asarray(ids, dtype=np.int64)
    conditions = list(conditions)
    if len(conditions) != ids.size:
        raise ShapeError(f"{ids.size} ids but {len(conditions)} conditions")
    P = nk.leaves(module.params, ())
    x_masked = ds.masked_batch(ids, conditions)
    f = _encode_all(P, x_masked, False, None, 0.0)
    pooled = {m: E.pool(f[m]) for m in MODALITIES}
    rec = E.reconstruct_linear(pooled["a"], pooled["t"], pooled["v"], P)
    h_ind = indirect_hardness(f["a"], f["t"], f["v"], P).data
    records = []
    for row, i in enumerate(ids):
        per, h_dir = direct_hardness({m: ds.features[m][i] for m in MODALITIES},
                                     {m: rec[m].data[row] for m in MODALITIES})
        hi = float(h_ind[row])
        records.append(HardnessRecord(int(i), conditions[row], per["a"], per["t"], per["v"], h_dir, hi,
                                      unified_hardness(h_dir, hi, cfg)))
    return records


def score(module: HardnessModule, ds: Dataset, i: int, condition: str = FULL,
          cfg: HardnessConfig = HardnessConfig()) -> HardnessRecord:
    return score_batch(module, ds, [i], [condition], cfg)[0]


CSV_COLUMNS = ("id", "condition", "h_dir_a", "h_dir_t", "h_dir_v", "h_dir", "h_ind", "h")


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.id, r.condition] + [repr(v) for v in astuple(r)[2:]])


def read_records(path) -> list[HardnessRecord]:
    try:
        rows = list(csv.reader(io.StringIO(read_text(path), newline="")))
    except csv.Error as e:
        raise IntegrityError(f"{path}: {e}") from None
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ContractError(f"{path}: unexpected hardness CSV header")
    out = []
    for n, r in enumerate(rows[1:], 2):
        if len(r) != len(CSV_COLUMNS):
            raise IntegrityError(f"{path}:{n}: expected {len(CSV_COLUMNS)} fields, got {len(r)}")
        try:
            out.append(HardnessRecord(int(r[0]), r[1], *map(float, r[2:])))
        except ValueError:
            raise IntegrityError(f"{path}:{n}: unparseable field") from None
    return out
