"""Datasets of flat feature vectors, per-domain normalisation, CSV IO and a
synthetic source/target generator with a controllable domain shift."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
STD_FLOOR = 1e-8


class DatasetFormatError(ValueError):
    pass


@dataclass
class UnlabeledDataset:
    x: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.x = np.asarray(self.x)
        if self.x.ndim != 2 or self.x.shape[1] < 1:
            raise ValueError(f"features must be a 2-D array with at least one column, got shape {self.x.shape}")
        if not np.isfinite(self.x).all():
            raise ValueError("features contain non-finite values")

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.x.shape[0]

    def with_x(self, x) -> "UnlabeledDataset":
        return dataclasses.replace(self, x=x)


@dataclass
class LabeledDataset(UnlabeledDataset):
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    num_classes: int = 0

    def __post_init__(self):
        super().__post_init__()
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.shape != (self.x.shape[0],):
            raise ValueError(f"{self.x.shape[0]} rows but {self.y.shape} labels")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def unlabeled(self) -> UnlabeledDataset:
        """The label-free view handed to the trainer for a target domain."""
        return UnlabeledDataset(self.x, self.split)


# -- normalisation -----------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def fit_normalization(train: UnlabeledDataset) -> NormalizationStats:
    x = np.asarray(train.x, dtype=np.float64)
    return NormalizationStats(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))


def apply_normalization(ds: UnlabeledDataset, stats: NormalizationStats):
    if ds.dim != stats.mean.shape[0]:
        raise ValueError(f"dataset has {ds.dim} features but stats cover {stats.mean.shape[0]}")
    x = (np.asarray(ds.x, dtype=np.float64) - stats.mean) / stats.std
    return ds.with_x(x.astype(ds.x.dtype))


def normalize_domain(splits: dict) -> dict:
    """Normalise every split of one domain with statistics from its own train split."""
    stats = fit_normalization(splits["train"])
    return {k: apply_normalization(v, stats) for k, v in splits.items()}


# -- synthetic shift ---------------------------------------------------------


@dataclass
class ShiftConfig:
    """Class-conditional Gaussian source data and a target made by
    ``scale * (A @ x) + translation + nuisance[y]``.

    ``A`` rotates by ``rotation_deg`` inside each of the first
    ``rotation_planes`` coordinate pairs (all of them when None).  Class
    means and covariance factors are drawn from ``seed`` unless given
    explicitly.  ``nuisance[y]`` is a per-class offset confined to
    ``nuisance_rank`` random oblique directions, with per-direction spread
    ``nuisance_strength``; it stands in for a domain-specific confound that
    moves each class differently.
    """

    num_classes: int = 8
    dim: int = 20
    class_sep: float = 1.0
    within_std: float = 1.0
    anisotropy: float = 0.5
    class_means: list | None = None
    class_cov_factors: list | None = None
    rotation_deg: float = 30.0
    rotation_planes: int | None = None
    scale: float | list = 1.5
    translation: float | list = 2.0
    nuisance_strength: float = 8.0
    nuisance_rank: int = 3
    train_per_class: int = 64
    val_per_class: int = 32
    test_per_class: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        for name in ("class_sep", "within_std", "anisotropy", "nuisance_strength"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if not 1 <= self.nuisance_rank <= self.dim:
            raise ValueError(f"nuisance_rank must lie in [1, {self.dim}]")
        for name in ("train_per_class", "val_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.rotation_planes is not None and not 0 <= self.rotation_planes <= self.dim // 2:
            raise ValueError(f"rotation_planes must lie in [0, {self.dim // 2}]")
        np.broadcast_to(np.asarray(self.scale, dtype=float), (self.dim,))
        np.broadcast_to(np.asarray(self.translation, dtype=float), (self.dim,))
        det = abs(np.linalg.det(self.shift_matrix()))
        if det <= 1e-6:
            raise ValueError(f"shift operator is singular (|det| = {det:.3g})")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ShiftConfig keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ShiftConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def rotation(self) -> np.ndarray:
        planes = self.dim // 2 if self.rotation_planes is None else self.rotation_planes
        a = np.eye(self.dim)
        t = math.radians(self.rotation_deg)
        c, s = math.cos(t), math.sin(t)
        for k in range(planes):
            i, j = 2 * k, 2 * k + 1
            a[i, i], a[i, j], a[j, i], a[j, j] = c, -s, s, c
        return a

    def shift_matrix(self) -> np.ndarray:
        """The full linear part ``diag(scale) @ A``."""
        scale = np.broadcast_to(np.asarray(self.scale, dtype=float), (self.dim,))
        return scale[:, None] * self.rotation()


def default_shift_config(seed: int = 0) -> ShiftConfig:
    return ShiftConfig(seed=seed)


def null_shift_config(seed: int = 0, **overrides) -> ShiftConfig:
    base = dict(rotation_deg=0.0, scale=1.0, translation=0.0, nuisance_strength=0.0, seed=seed)
    base.update(overrides)
    return ShiftConfig(**base)


def _class_geometry(cfg: ShiftConfig, rng: np.random.Generator):
    m, d = cfg.num_classes, cfg.dim
    if cfg.class_means is not None:
        means = np.asarray(cfg.class_means, dtype=float)
        if means.shape != (m, d):
            raise ValueError(f"class_means must be {m}x{d}, got {means.shape}")
    else:
        means = rng.normal(0.0, cfg.class_sep, size=(m, d))
    if cfg.class_cov_factors is not None:
        factors = np.asarray(cfg.class_cov_factors, dtype=float)
        if factors.shape != (m, d, d):
            raise ValueError(f"class_cov_factors must be {m}x{d}x{d}, got {factors.shape}")
    else:
        factors = np.empty((m, d, d))
        for k in range(m):
            q, _ = np.linalg.qr(rng.normal(size=(d, d)))
            spread = np.exp(cfg.anisotropy * rng.normal(size=d))
            factors[k] = cfg.within_std * q * spread
    return means, factors


def nuisance_offsets(cfg: ShiftConfig) -> np.ndarray:
    """Per-class target offsets, shape ``(num_classes, dim)``."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[3])
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.nuisance_rank)))
    codes = rng.normal(0.0, cfg.nuisance_strength, size=(cfg.num_classes, cfg.nuisance_rank))
    return codes @ basis.T


def generate_synthetic_shift(cfg: ShiftConfig, dtype=np.float32):
    """Return ``(source, target)``, each a dict of train/val/test LabeledDatasets.

    Target labels are produced for evaluation only.  Rows are class balanced
    and ordered by a per-split shuffle.
    """
    geo_seq, src_seq, tgt_seq, _ = np.random.SeedSequence(cfg.seed).spawn(4)
    means, factors = _class_geometry(cfg, np.random.default_rng(geo_seq))
    m, d = cfg.num_classes, cfg.dim
    linear = cfg.shift_matrix()
    translation = np.broadcast_to(np.asarray(cfg.translation, dtype=float), (d,))
    nuisance = nuisance_offsets(cfg)
    sizes = {"train": cfg.train_per_class, "val": cfg.val_per_class, "test": cfg.test_per_class}

    def draw(seq, transform):
        out = {}
        for split, rng in zip(SPLITS, (np.random.default_rng(s) for s in seq.spawn(len(SPLITS)))):
            n = sizes[split]
            y = np.repeat(np.arange(m), n)
            z = rng.normal(size=(m * n, d))
            x = means[y] + np.einsum("nij,nj->ni", factors[y], z)
            if transform:
                x = x @ linear.T + translation + nuisance[y]
            order = rng.permutation(m * n)
            out[split] = LabeledDataset(x[order].astype(dtype), split, y[order], m)
        return out

    return draw(src_seq, False), draw(tgt_seq, True)


# -- CSV IO ------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v)) if v.dtype == np.float64 else str(v)


def dataset_to_csv(ds: UnlabeledDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = [f"f{i}" for i in range(ds.dim)]
    labeled = isinstance(ds, LabeledDataset)
    w.writerow((["label"] if labeled else []) + cols)
    for r in range(len(ds)):
        row = [_fmt(v) for v in ds.x[r]]
        w.writerow(([str(int(ds.y[r]))] if labeled else []) + row)
    return buf.getvalue()


def save_dataset(ds: UnlabeledDataset, path) -> None:
    Path(path).write_text(dataset_to_csv(ds), encoding="utf-8")


def load_dataset(path, num_classes: int | None = None, split: str = "train", dtype=np.float32):
    """Read a dataset CSV.  A leading ``label`` column yields a LabeledDataset.

    ``num_classes`` defaults to ``max(label) + 1``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        labeled = bool(header) and header[0] == "label"
        feat = header[1:] if labeled else header
        if not feat or feat != [f"f{i}" for i in range(len(feat))]:
            raise DatasetFormatError(f"{path}:1: malformed header {header!r}")
        xs, ys = [], []
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise DatasetFormatError(f"{path}:{line}: expected {len(header)} cells, got {len(row)}")
            if labeled:
                try:
                    label = int(row[0])
                except ValueError:
                    raise DatasetFormatError(f"{path}:{line}: label {row[0]!r} is not an integer") from None
                if label < 0 or (num_classes is not None and label >= num_classes):
                    raise DatasetFormatError(f"{path}:{line}: label {label} outside [0, {num_classes})")
                ys.append(label)
                row = row[1:]
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{line}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DatasetFormatError(f"{path}:{line}: non-finite feature value")
            xs.append(vals)
    if not xs:
        raise DatasetFormatError(f"{path}: no data rows")
    x = np.asarray(xs, dtype=dtype)
    if not labeled:
        return UnlabeledDataset(x, split)
    y = np.asarray(ys, dtype=np.int64)
    m = int(y.max()) + 1 if num_classes is None else num_classes
    return LabeledDataset(x, split, y, m)
