"""Ablation harness: every loss variant trained on identical data and init, per seed."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ShiftConfig, generate_synthetic_shift, normalize_domain
from .metrics import macro_accuracy, micro_accuracy, predict
from .model import Architecture, LayerSpec, init_params, mlp_specs
from .trainer import TrainConfig, Variant, train

log = logging.getLogger(__name__)

TARGET_ONLY = "target_only"
ABLATION_VARIANTS = tuple(v.value for v in Variant) + (TARGET_ONLY,)
DIRECTION = "source->target"
MACRO_RULE = "macro accuracy = mean per-class recall over classes present in the truth labels"


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [64])
    feature_dim: int = 16
    proj_dim: int | None = None
    precision: str = "f32"

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if any(int(h) < 1 for h in self.hidden) or self.feature_dim < 1:
            raise ValueError("layer widths must be positive")
        if self.proj_dim is not None and self.proj_dim < 1:
            raise ValueError("proj_dim must be positive")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def architecture(self, in_dim: int, num_classes: int):
        p = self.feature_dim if self.proj_dim is None else self.proj_dim
        return Architecture(
            extractor=mlp_specs([in_dim, *map(int, self.hidden), self.feature_dim]),
            projector=(LayerSpec("affine", self.feature_dim, p), LayerSpec("batchnorm", p, p)),
            classifier=mlp_specs([self.feature_dim, num_classes]),
        )


@dataclass
class RunResult:
    variant: str
    seed: int
    macro: float = float("nan")
    micro: float = float("nan")
    source_macro: float = float("nan")
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class ExperimentReport:
    results: list[RunResult]
    metadata: dict = field(default_factory=dict)

    def variants(self) -> list[str]:
        present = {r.variant for r in self.results}
        return [v for v in ABLATION_VARIANTS if v in present]

    def values(self, variant: str, metric: str = "macro") -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.results if r.variant == variant and r.ok])

    def mean(self, variant: str, metric: str = "macro") -> float:
        v = self.values(variant, metric)
        return float(v.mean()) if v.size else float("nan")

    def std(self, variant: str, metric: str = "macro") -> float:
        v = self.values(variant, metric)
        return float(v.std()) if v.size else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "seed", "direction", "macro", "micro", "source_test_macro", "status"])
        for r in sorted(self.results, key=lambda r: (ABLATION_VARIANTS.index(r.variant), r.seed)):
            w.writerow([r.variant, r.seed, DIRECTION, repr(r.macro), repr(r.micro), repr(r.source_macro),
                        "ok" if r.ok else f"failed: {r.error}"])
        for v in self.variants():
            for agg, fn in (("mean", self.mean), ("std", self.std)):
                w.writerow([v, agg, DIRECTION, repr(fn(v, "macro")), repr(fn(v, "micro")),
                            repr(fn(v, "source_macro")), f"n={self.values(v).size}"])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'variant':<12} {'target macro':>18} {'target micro':>18} {'source macro':>14}  runs",
                 "-" * 72]
        for v in self.variants():
            n_ok = self.values(v).size
            n_all = sum(r.variant == v for r in self.results)
            lines.append(
                f"{v:<12} {100 * self.mean(v):8.2f} ± {100 * self.std(v):5.2f}   "
                f"{100 * self.mean(v, 'micro'):8.2f} ± {100 * self.std(v, 'micro'):5.2f}   "
                f"{100 * self.mean(v, 'source_macro'):12.2f}  {n_ok}/{n_all}"
            )
        lines.append("")
        lines.append(f"direction: {DIRECTION}; {MACRO_RULE}")
        return "\n".join(lines) + "\n"


def prepare_domains(shift: ShiftConfig, dtype=np.float32):
    """Generate and per-domain normalise one seeded benchmark instance."""
    source, target = generate_synthetic_shift(shift, dtype=dtype)
    return normalize_domain(source), normalize_domain(target)


def run_variant(variant: str, seed: int, source: dict, target: dict, train_cfg: TrainConfig,
                model_cfg: ModelConfig) -> RunResult:
    """Train one variant and score it on the target test split."""
    train_on, val_on, unlabeled = source["train"], source["val"], target["train"].unlabeled()
    tcfg = dataclasses.replace(train_cfg, seed=seed)
    if variant == TARGET_ONLY:
        train_on, val_on = target["train"], target["val"]
        tcfg = dataclasses.replace(tcfg, variant=Variant.SOURCE_ONLY)
    else:
        tcfg = dataclasses.replace(tcfg, variant=Variant(variant))
    arch = model_cfg.architecture(train_on.dim, train_on.num_classes)
    params = init_params(arch, seed, model_cfg.dtype)
    try:
        best, _ = train(tcfg, train_on, unlabeled, params, val_on)
    except (FloatingPointError, ValueError) as exc:
        log.warning("%s seed %d failed: %s", variant, seed, exc)
        return RunResult(variant, seed, error=str(exc))
    test = target["test"]
    pred = predict(best, test.x)
    src_pred = predict(best, source["test"].x)
    return RunResult(
        variant, seed,
        macro=macro_accuracy(test.y, pred, test.num_classes),
        micro=micro_accuracy(test.y, pred),
        source_macro=macro_accuracy(source["test"].y, src_pred, source["test"].num_classes),
    )


def _run_seed(args):
    shift, train_cfg, model_cfg, seed, variants = args
    source, target = prepare_domains(dataclasses.replace(shift, seed=seed), model_cfg.dtype)
    return [run_variant(v, seed, source, target, train_cfg, model_cfg) for v in variants]


def run_ablation(shift: ShiftConfig, train_cfg: TrainConfig, model_cfg: ModelConfig, seeds,
                 variants=ABLATION_VARIANTS, jobs: int = 1) -> ExperimentReport:
    """Train every variant for every seed on identical generated data and init.

    The seed drives the data draw, the parameter init and the batch order,
    so within a seed the variants differ only in their loss terms.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    unknown = set(variants) - set(ABLATION_VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants {sorted(unknown)}")
    tasks = [(shift, train_cfg, model_cfg, s, tuple(variants)) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_seed, tasks))
    else:
        chunks = [_run_seed(t) for t in tasks]
    results = sorted((r for c in chunks for r in c), key=lambda r: (ABLATION_VARIANTS.index(r.variant), r.seed))
    meta = {
        "seeds": seeds,
        "macro_rule": MACRO_RULE,
        "shift": shift.to_dict(),
        "train": train_cfg.to_dict(),
        "model": dataclasses.asdict(model_cfg),
    }
    return ExperimentReport(results, meta)
