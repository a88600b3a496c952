"""Recognition model: full-modality pretraining, curriculum training, retrieval-free inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import encoders as E
from . import numkit as nk
from .checkpoint import load, save
from .config import TrainConfig
from .curriculum import Curriculum
from .data import Dataset, check_condition, missing
from .encoders import MODALITIES
from .errors import ContractError, IntegrityError, ShapeError
from .hardness import _require_complete, minibatches
from .numkit import Tensor

log = logging.getLogger(__name__)

INIT, PRETRAINED, TRAINED = "INIT", "PRETRAINED", "TRAINED"
_NEXT = {INIT: PRETRAINED, PRETRAINED: TRAINED}


@dataclass
class ModelBundle:
    params: dict
    dims: dict
    n_classes: int
    stage: str = INIT
    history: dict = field(default_factory=dict)

    @classmethod
    def create(cls, dims: Mapping[str, int], n_classes: int, cfg: TrainConfig) -> "ModelBundle":
        rng = nk.Rng(cfg.seed).child("bundle.init")
        params = {}
        params.update(E.init_encoders(rng.child("enc"), dims, cfg.d, cfg.tokens))
        params.update(E.init_heads(rng.child("cls"), cfg.d, n_classes))
        params.update(E.init_autoencoders(rng.child("ae"), dims, cfg.d, cfg.d_h))
        return cls(params, dict(dims), n_classes)

    def advance(self, stage: str) -> None:
        if _NEXT.get(self.stage) != stage:
            raise ContractError(f"bundle cannot move from {self.stage} to {stage}")
        self.stage = stage

    def save(self, path) -> None:
        meta = {"kind": "bundle", "stage": self.stage, "classes": self.n_classes}
        meta.update({f"dim_{m}": self.dims[m] for m in MODALITIES})
        save(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        params, meta = load(path)
        if meta.get("kind") != "bundle":
            raise ContractError(f"{path} is not a model bundle checkpoint")
        if meta.get("stage") not in (INIT, PRETRAINED, TRAINED):
            raise IntegrityError(f"{path}: unknown stage {meta.get('stage')!r}")
        dims = {m: int(meta[f"dim_{m}"]) for m in MODALITIES}
        return cls(params, dims, int(meta["classes"]), meta["stage"])


def pretrain_loss(P: Mapping[str, Tensor], x: Mapping[str, np.ndarray], y, training=False, rng=None,
                  dropout=0.5) -> Tensor:
    loss = None
    for m in MODALITIES:
        f = E.encode(x[m], m, P, training, rng, dropout)
        term = nk.cross_entropy(E.classify(E.pool(f), P, f"cls.{m}"), y)
        loss = term if loss is None else nk.add(loss, term)
    return loss


def recognition_loss(P: Mapping[str, Tensor], x_masked: Mapping[str, np.ndarray],
                     x_true: Mapping[str, np.ndarray], y, conditions, training=False, rng=None,
                     dropout=0.5) -> tuple[Tensor, Tensor]:
    """Batch mean of joint-head CE plus reconstruction MSE of each instance's missing modalities.

    Returns ``(loss, reconstruction_part)``.
    """
    pooled = {m: E.pool(E.encode(x_masked[m], m, P, training, rng, dropout)) for m in MODALITIES}
    joint = E.joint_features(pooled)
    ce = nk.cross_entropy(E.classify(joint, P, "cls.joint"), y)
    rec = None
    for m in MODALITIES:
        gone = np.array([m in missing(c) for c in conditions], dtype=np.float64)[:, None]
        if not gone.any():
            continue
        x_hat = E.reconstruct_autoencoder(joint, m, P)
        term = nk.mse(nk.scale(x_true[m], gone), nk.scale(x_hat, gone))
        rec = term if rec is None else nk.add(rec, term)
    if rec is None:
        return ce, nk.Tensor(0.0)
    return nk.add(ce, rec), rec


PRETRAIN_TRAINABLE = lambda name: name.startswith(("enc.", "cls.a.", "cls.t.", "cls.v."))
CURRICULUM_TRAINABLE = lambda name: name.startswith(("enc.", "cls.joint.", "ae."))


def pretrain(bundle: ModelBundle, train: Dataset, cfg: TrainConfig) -> ModelBundle:
    """Stage 1: per-modality heads on complete samples."""
    if bundle.stage != INIT:
        raise ContractError(f"pretrain expects an INIT bundle, got {bundle.stage}")
    _require_complete(train)
    rng = nk.Rng(cfg.seed).child("bundle.pretrain")
    names = [k for k in bundle.params if PRETRAIN_TRAINABLE(k)]
    state = nk.AdamState(lr=cfg.lr)
    params = dict(bundle.params)
    trace = []
    for epoch in range(cfg.epochs):
        er = rng.child(f"epoch{epoch}")
        drop = er.child("dropout")
        total = 0.0
        for ids in minibatches(len(train), cfg.batch, er.child("order")):
            lv = nk.leaves(params, names)
            loss = pretrain_loss(lv, {m: train.features[m][ids] for m in MODALITIES}, train.labels[ids],
                                 True, drop, cfg.dropout)
            params = nk.adam_step(state, params, nk.backward(loss, {k: lv[k] for k in names}))
            total += loss.item() * len(ids)
        trace.append(total / len(train))
        log.info("pretrain epoch %d loss %.6f", epoch + 1, trace[-1])
    bundle.params = params
    bundle.history["pretrain_loss"] = trace
    bundle.advance(PRETRAINED)
    return bundle


def instance_stream(curricula: list[Curriculum], order, no_retrieval: bool = False) -> list[tuple[int, str]]:
    """Flatten curricula (in ``order``) into (sample id, condition) instances.

    Each block is the anchor then its supports most-similar-first; supports
    inherit the anchor's condition.
    """
    stream = []
    for j in order:
        c = curricula[j]
        stream.append((c.anchor, c.condition))
        if not no_retrieval:
            stream.extend((s, c.condition) for s in c.supports)
    return stream


def _check_curricula(curricula, n: int):
    for c in curricula:
        check_condition(c.condition)
        for i in (c.anchor, *c.supports):
            if not 0 <= i < n:
                raise IntegrityError(f"curriculum for anchor {c.anchor} references unknown sample id {i}")


def train_curriculum(bundle: ModelBundle, train: Dataset, curricula: list[Curriculum],
                     cfg: TrainConfig) -> ModelBundle:
    """Stage 2: joint classification + missing-modality reconstruction over the curriculum stream."""
    if bundle.stage != PRETRAINED:
        raise ContractError(f"curriculum training expects a PRETRAINED bundle, got {bundle.stage}")
    _check_curricula(curricula, len(train))
    rng = nk.Rng(cfg.seed).child("bundle.curriculum")
    names = [k for k in bundle.params if CURRICULUM_TRAINABLE(k)]
    state = nk.AdamState(lr=cfg.lr)
    params = dict(bundle.params)
    trace, counts = [], []
    for epoch in range(cfg.epochs):
        er = rng.child(f"epoch{epoch}")
        drop = er.child("dropout")
        stream = instance_stream(curricula, er.child("order").permutation(len(curricula)), cfg.no_retrieval)
        total = 0.0
        for s in range(0, len(stream), cfg.batch):
            chunk = stream[s:s + cfg.batch]
            ids = np.array([i for i, _ in chunk])
            conds = [c for _, c in chunk]
            lv = nk.leaves(params, names)
            loss, _ = recognition_loss(lv, train.masked_batch(ids, conds),
                                       {m: train.features[m][ids] for m in MODALITIES},
                                       train.labels[ids], conds, True, drop, cfg.dropout)
            params = nk.adam_step(state, params, nk.backward(loss, {k: lv[k] for k in names}))
            total += loss.item() * len(chunk)
        trace.append(total / len(stream))
        counts.append(len(stream))
        log.info("curriculum epoch %d loss %.6f instances %d", epoch + 1, trace[-1], len(stream))
    bundle.params = params
    bundle.history["curriculum_loss"] = trace
    bundle.history["instances"] = counts
    bundle.advance(TRAINED)
    return bundle


def logits(bundle: ModelBundle, x: Mapping[str, np.ndarray | None]) -> np.ndarray:
    """Joint-head logits in evaluation mode; ``None`` entries are missing modalities."""
    P = nk.leaves(bundle.params, ())
    pooled = {}
    for m in MODALITIES:
        xm = x.get(m)
        if xm is not None and np.shape(xm)[-1] != bundle.dims[m]:
            raise ShapeError(f"modality {m}: expected dim {bundle.dims[m]}, got {np.shape(xm)[-1]}")
        pooled[m] = E.pool(E.encode(xm, m, P, False))
    return E.classify(E.joint_features(pooled), P, "cls.joint").data


def _require_trained(bundle):
    if bundle.stage != TRAINED:
        raise ContractError(f"bundle not TRAINED (stage {bundle.stage})")


def predict(bundle: ModelBundle, sample, condition: str) -> int:
    """Class id for one ModalitySample under ``condition``; ties go to the lowest id."""
    _require_trained(bundle)
    masked = sample.masked(condition)
    return int(np.argmax(logits(bundle, masked.features)))


def predict_batch(bundle: ModelBundle, ds: Dataset, condition: str, ids=None) -> np.ndarray:
    _require_trained(bundle)
    ids = np.arange(len(ds)) if ids is None else np.asarray(ids)
    x = ds.masked_batch(ids, [condition] * len(ids))
    return np.argmax(logits(bundle, x), axis=-1)
