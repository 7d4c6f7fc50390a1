"""Feature extractor, projector and source classifier as explicit layer stacks.

Parameters live in a flat ``name -> array`` mapping so the optimiser and the
checkpoint writer can treat them uniformly.  Forward passes never mutate the
parameters; batch-norm running statistics are folded in afterwards with
:meth:`ModelParams.update_running_stats`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import DEFAULT_BN_EPS, BatchNormState, ShapeError, as_matrix, batch_normalize, batch_normalize_backward

SECTIONS = ("extractor", "projector", "classifier")
LAYER_KINDS = ("affine", "relu", "batchnorm")
CHECKPOINT_FORMAT = "barlow-adaptor-checkpoint"
CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.kind != "affine" and self.in_dim != self.out_dim:
            raise ValueError(f"{self.kind} layer must preserve its dim, got {self.in_dim}->{self.out_dim}")


@dataclass(frozen=True)
class Architecture:
    extractor: tuple[LayerSpec, ...]
    projector: tuple[LayerSpec, ...]
    classifier: tuple[LayerSpec, ...]
    bn_eps: float = DEFAULT_BN_EPS
    bn_momentum: float = 0.1

    def __post_init__(self):
        for name in SECTIONS:
            specs = getattr(self, name)
            if not specs:
                raise ValueError(f"{name} must have at least one layer")
            for i, (a, b) in enumerate(zip(specs, specs[1:])):
                if a.out_dim != b.in_dim:
                    raise ValueError(f"{name} layer {i} outputs {a.out_dim} but layer {i + 1} expects {b.in_dim}")
        d = self.feature_dim
        if self.projector[0].in_dim != d:
            raise ValueError(f"projector expects {self.projector[0].in_dim} inputs, extractor gives {d}")
        if self.classifier[0].in_dim != d:
            raise ValueError(f"classifier expects {self.classifier[0].in_dim} inputs, extractor gives {d}")

    @property
    def in_dim(self) -> int:
        return self.extractor[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.extractor[-1].out_dim

    @property
    def proj_dim(self) -> int:
        return self.projector[-1].out_dim

    @property
    def num_classes(self) -> int:
        return self.classifier[-1].out_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in SECTIONS:
            d[name] = [asdict(s) for s in getattr(self, name)]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        kw = dict(d)
        for name in SECTIONS:
            kw[name] = tuple(LayerSpec(**s) for s in d[name])
        return cls(**kw)


def mlp_specs(dims: list[int], final_relu: bool = False) -> tuple[LayerSpec, ...]:
    """Affine layers through ``dims`` with ReLU between them."""
    specs = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        specs.append(LayerSpec("affine", a, b))
        if i < len(dims) - 2 or final_relu:
            specs.append(LayerSpec("relu", b, b))
    return tuple(specs)


def default_architecture(in_dim: int, num_classes: int, hidden: int = 64,
                         feature_dim: int = 32, proj_dim: int | None = None) -> Architecture:
    proj_dim = feature_dim if proj_dim is None else proj_dim
    return Architecture(
        extractor=mlp_specs([in_dim, hidden, feature_dim]),
        projector=(LayerSpec("affine", feature_dim, proj_dim), LayerSpec("batchnorm", proj_dim, proj_dim)),
        classifier=mlp_specs([feature_dim, num_classes]),
    )


@dataclass
class ModelParams:
    arch: Architecture
    seed: int
    arrays: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    version: int = field(default=0, compare=False)

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch, self.seed,
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.version,
        )

    def bump(self):
        self.version += 1

    def update_running_stats(self, *caches: "StackCache"):
        """Fold batch statistics from training-mode forward caches into the running averages."""
        m = self.arch.bn_momentum
        for cache in caches:
            if cache is None:
                continue
            self._check(cache)
            for i, (kind, data) in enumerate(cache.layers):
                if kind != "batchnorm":
                    continue
                key = f"{cache.section}.{i}"
                for stat, value in (("running_mean", data.mean), ("running_var", data.var)):
                    buf = self.buffers[f"{key}.{stat}"]
                    buf *= 1.0 - m
                    buf += m * value.astype(buf.dtype)

    def _check(self, cache: "StackCache"):
        if cache.version != self.version:
            raise StaleCacheError(
                f"{cache.section} cache is from parameter version {cache.version}, params are at {self.version}"
            )

    def equal(self, other: "ModelParams") -> bool:
        """Bitwise equality of every array and buffer."""
        if self.arrays.keys() != other.arrays.keys() or self.buffers.keys() != other.buffers.keys():
            return False
        return all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for d1, d2 in ((self.arrays, other.arrays), (self.buffers, other.buffers))
            for a, b in ((d1[k], d2[k]) for k in d1)
        )


def init_params(arch: Architecture, seed: int, dtype=np.float32) -> ModelParams:
    """Glorot-uniform affine weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for section in SECTIONS:
        for i, spec in enumerate(getattr(arch, section)):
            key = f"{section}.{i}"
            if spec.kind == "affine":
                a = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
                arrays[f"{key}.weight"] = rng.uniform(-a, a, size=(spec.in_dim, spec.out_dim)).astype(dtype)
                arrays[f"{key}.bias"] = np.zeros(spec.out_dim, dtype=dtype)
            elif spec.kind == "batchnorm":
                arrays[f"{key}.gamma"] = np.ones(spec.out_dim, dtype=dtype)
                arrays[f"{key}.beta"] = np.zeros(spec.out_dim, dtype=dtype)
                buffers[f"{key}.running_mean"] = np.zeros(spec.out_dim, dtype=dtype)
                buffers[f"{key}.running_var"] = np.ones(spec.out_dim, dtype=dtype)
    return ModelParams(arch, int(seed), arrays, buffers)


# -- forward / backward ------------------------------------------------------


@dataclass
class StackCache:
    section: str
    version: int
    layers: list
    training: bool


def _run_stack(params: ModelParams, section: str, x, training: bool):
    x = as_matrix(x)
    specs = getattr(params.arch, section)
    if x.shape[1] != specs[0].in_dim:
        raise ShapeError(f"{section} expects {specs[0].in_dim} input columns, got {x.shape[1]}")
    layers = []
    for i, spec in enumerate(specs):
        key = f"{section}.{i}"
        if spec.kind == "affine":
            layers.append(("affine", x))
            x = x @ params.arrays[f"{key}.weight"] + params.arrays[f"{key}.bias"]
        elif spec.kind == "relu":
            mask = x > 0
            layers.append(("relu", mask))
            x = x * mask
        else:
            gamma = params.arrays[f"{key}.gamma"]
            beta = params.arrays[f"{key}.beta"]
            if training:
                x, bn_cache = batch_normalize(x, BatchNormState(gamma, beta, params.arch.bn_eps))
                layers.append(("batchnorm", bn_cache))
            else:
                mean = params.buffers[f"{key}.running_mean"]
                var = params.buffers[f"{key}.running_var"]
                x = gamma * (x - mean) / np.sqrt(var + params.arch.bn_eps) + beta
                layers.append(("batchnorm-frozen", None))
    return x, StackCache(section, params.version, layers, training)


def _stack_backward(params: ModelParams, cache: StackCache, grad, grads: dict):
    params._check(cache)
    if not cache.training:
        raise ValueError(f"{cache.section} cache came from an evaluation-mode pass")
    for i in reversed(range(len(cache.layers))):
        kind, data = cache.layers[i]
        key = f"{cache.section}.{i}"
        if kind == "affine":
            w = params.arrays[f"{key}.weight"]
            _accumulate(grads, f"{key}.weight", data.T @ grad)
            _accumulate(grads, f"{key}.bias", grad.sum(axis=0))
            grad = grad @ w.T
        elif kind == "relu":
            grad = grad * data
        else:
            grad, g_gamma, g_beta = batch_normalize_backward(grad, data)
            _accumulate(grads, f"{key}.gamma", g_gamma)
            _accumulate(grads, f"{key}.beta", g_beta)
    return grad


def _accumulate(grads: dict, name: str, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def extract_features(params: ModelParams, x, training: bool = True):
    return _run_stack(params, "extractor", x, training)


def project(params: ModelParams, f, training: bool = True):
    return _run_stack(params, "projector", f, training)


def classify(params: ModelParams, f, training: bool = True):
    return _run_stack(params, "classifier", f, training)


@dataclass
class ForwardCaches:
    """Caches from one coherent forward pass over a source/target pair."""

    features_s: StackCache
    logits: StackCache
    features_t: StackCache | None = None
    proj_s: StackCache | None = None
    proj_t: StackCache | None = None


@dataclass
class Upstream:
    """Loss gradients with respect to the network outputs.

    ``grad_fs``/``grad_ft`` are gradients arriving directly at the features
    (CORAL); ``grad_ps``/``grad_pt`` arrive at the projections (BFAL).
    """

    grad_logits: np.ndarray
    grad_fs: np.ndarray | None = None
    grad_ft: np.ndarray | None = None
    grad_ps: np.ndarray | None = None
    grad_pt: np.ndarray | None = None


def backward(params: ModelParams, caches: ForwardCaches, up: Upstream) -> dict[str, np.ndarray]:
    """Parameter gradients for every array in ``params``.

    Parameters that receive no signal (e.g. the projector in a source-only
    pass) get explicit zeros.
    """
    grads: dict[str, np.ndarray] = {}
    g_fs = _stack_backward(params, caches.logits, up.grad_logits, grads)
    if up.grad_fs is not None:
        g_fs = g_fs + up.grad_fs
    g_ft = up.grad_ft
    if up.grad_ps is not None:
        g_fs = g_fs + _stack_backward(params, caches.proj_s, up.grad_ps, grads)
    if up.grad_pt is not None:
        g = _stack_backward(params, caches.proj_t, up.grad_pt, grads)
        g_ft = g if g_ft is None else g_ft + g
    _stack_backward(params, caches.features_s, g_fs, grads)
    if g_ft is not None:
        if caches.features_t is None:
            raise ValueError("target gradients supplied without a target feature cache")
        _stack_backward(params, caches.features_t, g_ft, grads)
    return {k: grads.get(k, np.zeros_like(v)).astype(v.dtype, copy=False) for k, v in params.arrays.items()}


def predict_logits(params: ModelParams, x) -> np.ndarray:
    """Evaluation-mode logits using frozen batch-norm statistics."""
    f, _ = extract_features(params, x, training=False)
    logits, _ = classify(params, f, training=False)
    return logits


# -- checkpoints -------------------------------------------------------------


def _encode(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _decode(d: dict, dtype) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).astype(dtype).reshape(d["shape"])


def checkpoint_dict(params: ModelParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": np.dtype(params.dtype).name,
        "seed": params.seed,
        "arch": params.arch.to_dict(),
        "arrays": {k: _encode(v) for k, v in params.arrays.items()},
        "buffers": {k: _encode(v) for k, v in params.buffers.items()},
    }


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(params), sort_keys=True, indent=1) + "\n")


def load_checkpoint(path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    dtype = np.dtype(doc["dtype"])
    arch = Architecture.from_dict(doc["arch"])
    reference = init_params(arch, 0, dtype)
    arrays = {k: _decode(v, dtype) for k, v in doc["arrays"].items()}
    buffers = {k: _decode(v, dtype) for k, v in doc["buffers"].items()}
    for have, want, what in ((arrays, reference.arrays, "array"), (buffers, reference.buffers, "buffer")):
        if have.keys() != want.keys():
            raise ValueError(f"{path}: {what} names do not match the architecture")
        for k in want:
            if have[k].shape != want[k].shape:
                raise ValueError(f"{path}: {k} has shape {have[k].shape}, expected {want[k].shape}")
            if not np.isfinite(have[k]).all():
                raise ValueError(f"{path}: {k} contains non-finite values")
    return ModelParams(arch, int(doc["seed"]), arrays, buffers)
