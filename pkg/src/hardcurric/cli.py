"""Command-line entry point: one subcommand per pipeline stage.

    hardcurric synth-data      --out run
    hardcurric train-hardness  --out run
    hardcurric score-hardness  --out run
    hardcurric build-db        --out run
    hardcurric retrieve        --out run [--anchor ID]
    hardcurric train           --out run
    hardcurric eval            --out run
    hardcurric ablate          --out run --ablate_seeds 0,1,2

Every Config key is also a ``--key value`` flag; ``--config FILE`` loads a
key=value file first and flags override it.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import Config, load_config
from .curriculum import (build_curricula, build_curriculum, build_indices, build_store, read_curricula,
                         train_retrieval_encoders, write_curricula)
from .data import read_dataset, write_synth
from .encoders import MODALITIES
from .errors import ContractError, HardcurricError
from .evalkit import VARIANTS, format_report, run_ablations, write_report
from .featstore import read_store, write_store
from .hardness import FROZEN, HardnessModule, read_records, score_batch, train_hardness, write_records
from .checkpoint import load, save
from .pipeline import anchor_conditions, report_meta
from .trainer import TRAINED, ModelBundle, pretrain, train_curriculum
from .evalkit import evaluate_conditions

log = logging.getLogger("hardcurric")

SUBCOMMANDS = ("synth-data", "train-hardness", "score-hardness", "build-db", "retrieve", "train", "eval", "ablate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hardcurric", description="Hardness-aware curriculum pipeline.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--anchor", type=int, help="retrieve: emit only this anchor's curriculum")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    for f in fields(Config):
        p.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar=f.name.upper())
    return p


class Paths:
    def __init__(self, cfg: Config):
        self.out = Path(cfg.out)
        self.data = cfg.data_dir
        self.hardness = self.out / "hardness.hmc1"
        self.hardness_csv = self.out / "hardness.csv"
        self.retrieval = self.out / "retrieval.hmc1"
        self.store = self.out / "store"
        self.curricula = self.out / "curricula.csv"
        self.pretrained = self.out / "pretrained.hmc1"
        self.bundle = self.out / "bundle.hmc1"
        self.report = self.out / "report.csv"
        self.ablation = self.out / "ablation"


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise ContractError(f"{what} not found at {path}; run the earlier stage first")
    return path


def _train_set(paths):
    return read_dataset(_need(paths.data / "train", "training data"))


def cmd_synth_data(cfg, paths, args):
    train, test = write_synth(cfg.synth_spec(), paths.data)
    log.info("wrote %d train / %d test samples (%d hard) to %s", len(train), len(test),
             int(train.hard.sum() + test.hard.sum()), paths.data)


def cmd_train_hardness(cfg, paths, args):
    module = train_hardness(_train_set(paths), cfg.train)
    module.save(paths.hardness)


def cmd_score_hardness(cfg, paths, args):
    train = _train_set(paths)
    module = HardnessModule.load(_need(paths.hardness, "hardness module"))
    if module.stage != FROZEN:
        raise ContractError(f"hardness module not frozen (stage {module.stage})")
    records = score_batch(module, train, np.arange(len(train)), anchor_conditions(len(train), cfg.seed),
                          cfg.hardness)
    write_records(records, paths.hardness_csv)


def cmd_build_db(cfg, paths, args):
    train = _train_set(paths)
    ret = None
    if not cfg.raw_retrieval_features:
        ret = train_retrieval_encoders(train, cfg.train)
        save(paths.retrieval, ret, {"kind": "retrieval"})
    write_store(build_store(train, ret, cfg.metrics, cfg.seed), paths.store)


def cmd_retrieve(cfg, paths, args):
    store = read_store(_need(paths.store, "feature store"))
    records = read_records(_need(paths.hardness_csv, "hardness scores"))
    indices = build_indices(store)
    if args.anchor is not None:
        picked = [r for r in records if r.id == args.anchor]
        if not picked:
            raise ContractError(f"no hardness record for anchor {args.anchor}")
        records = picked
    curricula = build_curricula(records, store, indices, cfg.k, cfg.fixed_k)
    write_curricula(curricula, paths.curricula)
    if args.anchor is not None:
        sys.stdout.write(paths.curricula.read_text())


def cmd_train(cfg, paths, args):
    train = _train_set(paths)
    curricula = read_curricula(_need(paths.curricula, "curricula"))
    bundle = pretrain(ModelBundle.create(train.dims, train.n_classes, cfg.train), train, cfg.train)
    bundle.save(paths.pretrained)
    train_curriculum(bundle, train, curricula, cfg.train)
    bundle.save(paths.bundle)


def cmd_eval(cfg, paths, args):
    if not paths.bundle.exists():
        raise ContractError(f"bundle not TRAINED: no checkpoint at {paths.bundle}")
    bundle = ModelBundle.load(paths.bundle)
    if bundle.stage != TRAINED:
        raise ContractError(f"bundle not TRAINED (stage {bundle.stage})")
    test = read_dataset(_need(paths.data / "test", "test data"))
    report = evaluate_conditions(bundle, test, cfg.binary, cfg.f1, report_meta(cfg))
    write_report(report, paths.report)
    sys.stdout.write(format_report(report))


def cmd_ablate(cfg, paths, args):
    train = _train_set(paths)
    test = read_dataset(_need(paths.data / "test", "test data"))
    seeds = [int(s) for s in cfg.ablate_seeds.split(",") if s.strip()]
    result = run_ablations(train, test, cfg, seeds)
    paths.ablation.mkdir(parents=True, exist_ok=True)
    for (variant, seed), table in result.tables.items():
        write_report(table, paths.ablation / f"{variant}_seed{seed}.csv")
    for (variant, seed), table in result.deltas.items():
        write_report(table, paths.ablation / f"delta_{variant}_seed{seed}.csv")
    lines = ["variant,seed,WA_or_Acc,UA_or_F1"]
    for (variant, seed), table in sorted(result.tables.items(), key=lambda kv: (VARIANTS.index(kv[0][0]), kv[0][1])):
        avg = table.average
        lines.append(f"{variant},{seed}," + ",".join(f"{avg[k]:.6f}" for k in table.metrics))
    (paths.ablation / "summary.csv").write_text("\n".join(lines) + "\n")


COMMANDS = {
    "synth-data": cmd_synth_data, "train-hardness": cmd_train_hardness, "score-hardness": cmd_score_hardness,
    "build-db": cmd_build_db, "retrieve": cmd_retrieve, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        cfg = load_config(args.config, overrides)
        paths = Paths(cfg)
        paths.out.mkdir(parents=True, exist_ok=True)
        log.info("%s: config %s seed %d", args.subcommand, cfg.digest(), cfg.seed)
        COMMANDS[args.subcommand](cfg, paths, args)
    except HardcurricError as e:
        print(f"hardcurric {args.subcommand}: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"hardcurric {args.subcommand}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
