"""End-to-end run: hardness -> database -> curricula -> recognition model -> report."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .checkpoint import checksum
from .config import Config, parse_pairs
from .curriculum import build_curricula, build_indices, build_store, train_retrieval_encoders
from .data import Dataset
from .evalkit import ReportTable, evaluate_conditions
from .hardness import HardnessModule, draw_conditions, score_batch, train_hardness
from .trainer import ModelBundle, pretrain, train_curriculum

log = logging.getLogger(__name__)


def anchor_conditions(n: int, seed: int) -> list[str]:
    """Training-anchor conditions; fixed per seed so curricula stay valid across epochs."""
    return draw_conditions(n, nk.Rng(seed).child("anchor.conditions"))


def report_meta(cfg: Config) -> dict:
    meta = {"seed": cfg.seed, "config_hash": cfg.digest(), "ablation": cfg.train.ablation}
    meta.update({f"config.{k}": v for k, v in
                 (line.split("=", 1) for line in cfg.canonical().splitlines())})
    return meta


def config_from_meta(meta: dict) -> Config:
    """Rebuild the exact run configuration echoed into a report."""
    return parse_pairs({k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})


@dataclass
class SeedCache:
    """Artifacts that depend only on the seed and shared hyperparameters, not on ablation flags."""

    entries: dict = field(default_factory=dict)

    def get(self, key, build):
        if key not in self.entries:
            self.entries[key] = build()
        return self.entries[key]


@dataclass
class RunResult:
    report: ReportTable
    bundle: ModelBundle
    hardness: HardnessModule
    records: list
    curricula: list
    store: object
    pretrained_checksum: str


def run_pipeline(train: Dataset, test: Dataset, cfg: Config, cache: SeedCache | None = None) -> RunResult:
    cache = cache if cache is not None else SeedCache()
    tc = cfg.train
    shared = (tc.seed, tc.epochs, tc.lr, tc.dropout, tc.batch, tc.d, tc.tokens, tc.d_r, tc.d_h)

    hard = cache.get(("hardness", shared), lambda: train_hardness(train, tc))
    conds = anchor_conditions(len(train), tc.seed)
    records = score_batch(hard, train, np.arange(len(train)), conds, cfg.hardness)

    ret = None if tc.raw_retrieval_features else cache.get(("retrieval", shared),
                                                             lambda: train_retrieval_encoders(train, tc))
    store = build_store(train, ret, cfg.metrics, tc.seed)
    indices = build_indices(store)
    curricula = build_curricula(records, store, indices, tc.k, tc.fixed_k)

    def _pretrain():
        b = pretrain(ModelBundle.create(train.dims, train.n_classes, tc), train, tc)
        return b.params, dict(b.history)

    pre_params, pre_hist = cache.get(("pretrain", shared), _pretrain)
    bundle = ModelBundle(dict(pre_params), train.dims, train.n_classes, "PRETRAINED", dict(pre_hist))
    pre_sum = checksum(pre_params)
    train_curriculum(bundle, train, curricula, tc)
    report = evaluate_conditions(bundle, test, cfg.binary, cfg.f1, report_meta(cfg))
    log.info("seed %d %s average %s", tc.seed, tc.ablation, report.average)
    return RunResult(report, bundle, hard, records, curricula, store, pre_sum)
