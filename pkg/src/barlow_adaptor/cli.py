"""``barlow-adaptor`` command line: generate, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 config or input error, 2 runtime or numerical
error, 3 gradient check failure.  ``BARLOW_LOG`` selects the log level
(error, info, debug; default info).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import gradcheck
from .config import ConfigError, RunConfig
from .data import DatasetFormatError, LabeledDataset, ShiftConfig, fit_normalization, generate_synthetic_shift, \
    load_dataset, normalize_domain, save_dataset
from .experiment import ABLATION_VARIANTS, MACRO_RULE, run_ablation
from .metrics import macro_accuracy, micro_accuracy, predict
from .model import init_params, load_checkpoint, save_checkpoint
from .trainer import Variant, train

log = logging.getLogger("barlow_adaptor")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3
SPLITS = ("train", "val", "test")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("BARLOW_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"BARLOW_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def resolve_config(args) -> RunConfig:
    """Load ``--config`` (or defaults) and fold the command-line overrides into it."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.eval.seeds = [args.seed]
        if cfg.data.shift is not None:
            cfg.data.shift = dataclasses.replace(cfg.data.shift, seed=args.seed)
    if getattr(args, "precision", None):
        cfg.model = dataclasses.replace(cfg.model, precision=args.precision)
    if getattr(args, "variant", None) and args.command == "train":
        try:
            cfg.train = dataclasses.replace(cfg.train, variant=Variant(args.variant))
        except ValueError:
            raise ConfigError(f"unknown variant {args.variant!r}; choose from {[v.value for v in Variant]}") from None
    if getattr(args, "variant", None) and args.command == "ablate":
        variants = [v.strip() for v in args.variant.split(",")]
        bad = sorted(set(variants) - set(ABLATION_VARIANTS))
        if bad:
            raise ConfigError(f"unknown variants {bad}; choose from {list(ABLATION_VARIANTS)}")
        cfg.eval.variants = variants
    if args.out:
        cfg.eval.out_dir = args.out
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.eval.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_domains(cfg: RunConfig):
    """Per-domain normalised ``(source, target)`` split dicts from the data section."""
    dtype = cfg.model.dtype
    if cfg.data.shift is not None:
        source, target = generate_synthetic_shift(cfg.data.shift, dtype=dtype)
        return normalize_domain(source), normalize_domain(target)
    root = Path(cfg.data.dir)
    m = None
    if (root / "shift_config.json").exists():
        m = ShiftConfig.load(root / "shift_config.json").num_classes
    domains = []
    for name in ("source", "target"):
        splits = {}
        for split in SPLITS:
            path = root / f"{name}_{split}.csv"
            if not path.exists():
                raise ConfigError(f"missing dataset file {path}")
            splits[split] = load_dataset(path, num_classes=m, split=split, dtype=dtype)
        domains.append(splits)
    if m is None:
        m = max(s.num_classes for d in domains for s in d.values() if isinstance(s, LabeledDataset))
        domains = [{k: LabeledDataset(v.x, v.split, v.y, m) for k, v in d.items()} for d in domains]
    return domains[0], domains[1]


# -- commands ----------------------------------------------------------------


def cmd_generate(cfg: RunConfig, args) -> int:
    if cfg.data.shift is None:
        raise ConfigError("generate needs a data.shift section")
    out = _out_dir(cfg)
    source, target = generate_synthetic_shift(cfg.data.shift, dtype=cfg.model.dtype)
    stats = {}
    for name, splits in (("source", source), ("target", target)):
        stats[name] = fit_normalization(splits["train"]).to_dict()
        for split, ds in normalize_domain(splits).items():
            save_dataset(ds, out / f"{name}_{split}.csv")
    cfg.data.shift.save(out / "shift_config.json")
    (out / "normalization.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    cfg.echo(out)
    print(f"wrote 6 normalised CSVs to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    source, target = load_domains(cfg)
    arch = cfg.model.architecture(source["train"].dim, source["train"].num_classes)
    params = init_params(arch, cfg.train.seed, cfg.model.dtype)
    t0 = time.perf_counter()
    best, history = train(cfg.train, source["train"], target["train"].unlabeled(), params, source["val"])
    log.info("trained %s for %d epochs in %.1fs", cfg.train.variant.value, cfg.train.epochs,
             time.perf_counter() - t0)
    save_checkpoint(best, out / "checkpoint.json")
    (out / "history.csv").write_text(history.to_csv())
    cfg.echo(out)
    rec = history.epochs[history.best_epoch]
    print(f"variant {cfg.train.variant.value}: selected epoch {history.best_epoch}, "
          f"source val macro {100 * rec.src_val_macro:.2f}")
    print(f"wrote {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.checkpoint or not args.data:
        raise ConfigError("eval needs --checkpoint and --data")
    try:
        params = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from None
    ds = load_dataset(args.data, num_classes=params.arch.num_classes, split="eval", dtype=params.dtype)
    if not isinstance(ds, LabeledDataset):
        raise ConfigError(f"{args.data} has no label column")
    if ds.dim != params.arch.in_dim:
        raise ConfigError(f"{args.data} has {ds.dim} features, checkpoint expects {params.arch.in_dim}")
    pred = predict(params, ds.x)
    macro = macro_accuracy(ds.y, pred, ds.num_classes)
    micro = micro_accuracy(ds.y, pred)
    print(f"macro {100 * macro:.2f}  micro {100 * micro:.2f}  (n={len(ds)})")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["data", "n", "macro", "micro", "macro_rule"])
    w.writerow([Path(args.data).name, len(ds), repr(macro), repr(micro), MACRO_RULE])
    (out / "metrics.csv").write_text(buf.getvalue())
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    seed = 0 if args.seed is None else args.seed
    results = gradcheck.run_suite(seed=seed, trials=args.trials)
    print(f"{'op':<18} {'trials':>6} {'worst rel err':>14} {'tol':>8} {'secs':>6}  status")
    for r in results:
        print(f"{r.op:<18} {r.trials:>6} {r.worst:>14.3e} {r.tolerance:>8.0e} {r.seconds:>6.1f}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


def cmd_ablate(cfg: RunConfig, args) -> int:
    if cfg.data.shift is None:
        raise ConfigError("ablate regenerates data per seed and needs a data.shift section")
    out = _out_dir(cfg)
    t0 = time.perf_counter()
    report = run_ablation(cfg.data.shift, cfg.train, cfg.model, cfg.eval.seeds, tuple(cfg.eval.variants),
                          jobs=args.jobs)
    log.info("ablation finished in %.1fs", time.perf_counter() - t0)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.table())
    cfg.echo(out)
    print(report.table(), end="")
    failed = [r for r in report.results if not r.ok]
    if failed:
        log.error("%d of %d runs diverged", len(failed), len(report.results))
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; defaults are used when omitted")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", help="output directory (default: eval.out_dir)")
    common.add_argument("--jobs", type=int, default=1, help="parallel seeds for ablate")
    common.add_argument("--variant", help="loss variant for train; comma list for ablate")
    common.add_argument("--precision", choices=("f32", "f64"))

    p = argparse.ArgumentParser(prog="barlow-adaptor", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic source/target CSVs")
    sub.add_parser("train", parents=[common], help="train one variant, write checkpoint and history")
    ev = sub.add_parser("eval", parents=[common], help="score a checkpoint on a labeled CSV")
    ev.add_argument("--checkpoint")
    ev.add_argument("--data")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward pass")
    gc.add_argument("--trials", type=int, default=100)
    sub.add_parser("ablate", parents=[common], help="every variant over every seed; report CSV and table")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
