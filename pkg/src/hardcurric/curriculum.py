"""Retrieval feature databases, candidate retrieval and hardness-scaled curricula."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import encoders as E
from . import numkit as nk
from .config import TrainConfig
from .data import Dataset, available
from .encoders import MODALITIES
from .errors import ContractError, DomainError, IntegrityError, read_text
from .featstore import FeatureStore, FlatIndex, Metric, build_index, topk
from .hardness import HardnessRecord, minibatches

log = logging.getLogger(__name__)


# ------------------------------------------------------ feature database


def train_retrieval_encoders(train: Dataset, cfg: TrainConfig) -> dict:
    """Fit the two-layer retrieval encoders through a throwaway classification head per modality."""
    rng = nk.Rng(cfg.seed).child("retrieval")
    params = E.init_retrieval_encoders(rng.child("init"), train.dims, cfg.d_r, train.n_classes)
    state = nk.AdamState(lr=cfg.lr)
    for epoch in range(cfg.epochs):
        for ids in minibatches(len(train), cfg.batch, rng.child(f"epoch{epoch}")):
            lv = nk.leaves(params)
            loss = None
            for m in MODALITIES:
                z = E.retrieval_embed(train.features[m][ids], m, lv)
                term = nk.cross_entropy(E.classify(z, lv, f"ret.{m}.cls"), train.labels[ids])
                loss = term if loss is None else nk.add(loss, term)
            params = nk.adam_step(state, params, nk.backward(loss, lv))
    return {k: v for k, v in params.items() if ".cls." not in k}


def embed(ds: Dataset, ret_params: Mapping[str, np.ndarray] | None) -> dict[str, np.ndarray]:
    """Retrieval features for every row, rounded to the float32 storage precision.

    ``ret_params=None`` uses the raw features themselves.
    """
    if ret_params is None:
        return {m: ds.features[m].astype(np.float32) for m in MODALITIES}
    P = nk.leaves(ret_params, ())
    return {m: E.retrieval_embed(ds.features[m], m, P).data.astype(np.float32) for m in MODALITIES}


def build_store(train: Dataset, ret_params, metrics: Mapping[str, str] | None = None, seed: int = 0) -> FeatureStore:
    from .featstore import DEFAULT_METRICS
    return FeatureStore(embed(train, ret_params), train.labels, dict(metrics or DEFAULT_METRICS), seed)


def build_indices(store: FeatureStore) -> dict[str, FlatIndex]:
    """One flat index per modality; zero rows under inner product become the uniform unit vector."""
    out = {}
    for m in MODALITIES:
        out[m] = build_index(store.matrix(m), store.metrics[m], zero_rows="uniform")
        if out[m].flagged:
            log.warning("modality %s: %d zero rows indexed as uniform vectors", m, len(out[m].flagged))
    return out


# ------------------------------------------------------------ retrieval


def _query(index: FlatIndex, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if index.metric is Metric.INNER_PRODUCT and not np.any(z):
        return np.full(z.shape, 1.0 / math.sqrt(z.size))
    return z


def retrieve_candidates(query: Mapping[str, np.ndarray], condition: str, indices: Mapping[str, FlatIndex],
                        k: int, exclude: int | None = None) -> list[int]:
    """Union of per-modality top-k ids over the available modalities, deduplicated and sorted.

    ``exclude`` drops the anchor's own row after the union.
    """
    if not condition:
        raise ContractError("no available modality to retrieve with")
    mods = available(condition)
    found = set()
    for m in mods:
        found.update(i for i, _ in topk(indices[m], _query(indices[m], query[m]), k))
    found.discard(exclude)
    return sorted(found)


def integrated_similarity(query: Mapping[str, np.ndarray], cand: int, condition: str,
                          store: FeatureStore) -> float:
    """Mean rooted L2 distance to ``cand`` over the available modalities (smaller = more similar)."""
    if not 0 <= cand < len(store):
        raise IntegrityError(f"unknown sample id {cand}")
    dists = []
    for m in available(condition):
        diff = store.features[m][cand].astype(np.float64) - np.asarray(query[m], dtype=np.float64)
        dists.append(math.sqrt(float(np.dot(diff, diff))))
    return sum(dists) / len(dists)


def dynamic_k(h: float, k: int) -> int:
    """Support count ceil(h * k) for hardness h in (0, 1)."""
    if not 0.0 < h < 1.0:
        raise DomainError(f"hardness must lie strictly inside (0, 1), got {h}")
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    return min(max(math.ceil(h * k), 1), k)


@dataclass(frozen=True)
class Curriculum:
    anchor: int
    condition: str
    h: float
    k_prime: int
    supports: tuple  # most similar first
    short: bool = False  # fewer candidates than k_prime were available


def rank_candidates(query, cands, condition, store) -> list[tuple[float, int]]:
    return sorted((integrated_similarity(query, c, condition, store), c) for c in cands)


def build_curriculum(anchor: int, query: Mapping[str, np.ndarray], condition: str, h: float,
                     store: FeatureStore, indices: Mapping[str, FlatIndex], k: int,
                     fixed_k: bool = False, exclude_self: bool = True) -> Curriculum:
    """Rank the candidate union by integrated similarity and keep the top ceil(h * k)."""
    kp = k if fixed_k else dynamic_k(h, k)
    cands = retrieve_candidates(query, condition, indices, k, anchor if exclude_self else None)
    ranked = [c for _, c in rank_candidates(query, cands, condition, store)][:k]
    supports = tuple(ranked[:kp])
    short = len(supports) < kp
    if short:
        log.debug("anchor %d: only %d of %d supports available", anchor, len(supports), kp)
    return Curriculum(anchor, condition, h, kp, supports, short)


def build_curricula(records: list[HardnessRecord], store: FeatureStore, indices: Mapping[str, FlatIndex],
                    k: int, fixed_k: bool = False) -> list[Curriculum]:
    """Curricula for database members; each record's id is its store row."""
    out = []
    for r in records:
        query = {m: store.features[m][r.id] for m in MODALITIES}
        out.append(build_curriculum(r.id, query, r.condition, r.h, store, indices, k, fixed_k))
    return out


CSV_COLUMNS = ("anchor_id", "condition", "h", "k_prime", "support_ids")


def write_curricula(curricula, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in curricula:
            w.writerow([c.anchor, c.condition, repr(c.h), c.k_prime, ";".join(map(str, c.supports))])


def read_curricula(path) -> list[Curriculum]:
    try:
        rows = list(csv.reader(io.StringIO(read_text(path), newline="")))
    except csv.Error as e:
        raise IntegrityError(f"{path}: {e}") from None
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise IntegrityError(f"{path}: unexpected curriculum CSV header")
    out = []
    for n, r in enumerate(rows[1:], 2):
        if len(r) != len(CSV_COLUMNS):
            raise IntegrityError(f"{path}:{n}: expected {len(CSV_COLUMNS)} fields, got {len(r)}")
        try:
            sup = tuple(int(s) for s in r[4].split(";") if s)
            kp = int(r[3])
            out.append(Curriculum(int(r[0]), r[1], float(r[2]), kp, sup, len(sup) < kp))
        except ValueError:
            raise IntegrityError(f"{path}:{n}: unparseable field") from None
    return out

