"""A small layered classifier split into a shared extractor and a private head.

Parameters of each dense layer are kept as one flat float64 vector holding the
``in x out`` weight matrix (row-major) followed by the ``out`` bias, which is
the unit the sparsifier masks. Forward and backward are written out by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .sparsify import MaskMatrix
from .tensor import Rng, check_finite

EXTRACTOR = "extractor"
CLASSIFIER = "classifier"

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" or "activation"
    in_dim: int
    out_dim: int
    role: str = EXTRACTOR
    fn: str = "tanh"  # activation function, ignored for dense layers


@dataclass(frozen=True)
class Architecture:
    """A validated chain of layer specs."""

    specs: tuple

    def __post_init__(self):
        specs = self.specs
        if not specs:
            raise ValueError("architecture needs at least one layer")
        for a, b in zip(specs, specs[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        for s in specs:
            if s.kind not in ("dense", "activation"):
                raise ValueError(f"unknown layer kind {s.kind!r}")
            if s.kind == "activation" and (s.fn not in _ACTIVATIONS or s.in_dim != s.out_dim):
                raise ValueError(f"bad activation layer {s}")
            if s.role not in (EXTRACTOR, CLASSIFIER):
                raise ValueError(f"unknown role {s.role!r}")
        roles = [s.role for s in specs if s.kind == "dense"]
        split = roles.index(CLASSIFIER) if CLASSIFIER in roles else len(roles)
        if split == 0 or split == len(roles) or EXTRACTOR in roles[split:]:
            raise ValueError("need leading extractor dense layers followed by classifier dense layers")
        if specs[-1].kind != "dense":
            raise ValueError("the last layer must be dense")

    @cached_property
    def dense(self) -> list[LayerSpec]:
        return [s for s in self.specs if s.kind == "dense"]

    @cached_property
    def split(self) -> int:
        return [s.role for s in self.dense].index(CLASSIFIER)

    @cached_property
    def head_start(self) -> int:
        """Index in ``specs`` of the first classifier layer."""
        return next(i for i, s in enumerate(self.specs) if s.role == CLASSIFIER)

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.specs[-1].out_dim

    @cached_property
    def layer_sizes(self) -> list[int]:
        return [s.in_dim * s.out_dim + s.out_dim for s in self.dense]


def mlp(in_dim: int, hidden: Sequence[int], num_classes: int, activation: str = "tanh",
        head_hidden: Sequence[int] = ()) -> Architecture:
    """Extractor ``in -> hidden... `` (each followed by ``activation``) and a linear head.

    ``head_hidden`` adds hidden layers to the classifier head.
    """
    specs = []
    dims = [in_dim, *hidden]
    for a, b in zip(dims, dims[1:]):
        specs += [LayerSpec("dense", a, b, EXTRACTOR), LayerSpec("activation", b, b, EXTRACTOR, activation)]
    dims = [dims[-1], *head_hidden, num_classes]
    for j, (a, b) in enumerate(zip(dims, dims[1:])):
        specs.append(LayerSpec("dense", a, b, CLASSIFIER))
        if j < len(dims) - 2:
            specs.append(LayerSpec("activation", b, b, CLASSIFIER, activation))
    return Architecture(tuple(specs))


@dataclass(frozen=True)
class ModelParams:
    """Flat per-dense-layer parameters; layers before ``arch.split`` are the extractor."""

    arch: Architecture
    layers: tuple

    def __post_init__(self):
        sizes = self.arch.layer_sizes
        if len(self.layers) != len(sizes):
            raise ValueError(f"expected {len(sizes)} layers, got {len(self.layers)}")
        for j, (v, n) in enumerate(zip(self.layers, sizes)):
            if v.ndim != 1 or v.size != n:
                raise ValueError(f"layer {j}: expected flat size {n}, got shape {v.shape}")

    @property
    def split(self) -> int:
        return self.arch.split

    @property
    def ext(self) -> tuple:
        return self.layers[: self.split]

    @property
    def cls(self) -> tuple:
        return self.layers[self.split:]

    def with_ext(self, ext: Sequence[np.ndarray]) -> "ModelParams":
        return replace(self, layers=tuple(ext) + self.cls)

    def with_cls(self, cls: Sequence[np.ndarray]) -> "ModelParams":
        return replace(self, layers=self.ext + tuple(cls))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.layers)

    def copy(self) -> "ModelParams":
        return replace(self, layers=tuple(v.copy() for v in self.layers))

    def unpack(self, j: int, layer: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(W, b) views of dense layer ``j``."""
        s = self.arch.dense[j]
        v = self.layers[j] if layer is None else layer
        nw = s.in_dim * s.out_dim
        return v[:nw].reshape(s.in_dim, s.out_dim), v[nw:]


def zeros_like(params: ModelParams) -> ModelParams:
    return replace(params, layers=tuple(np.zeros_like(v) for v in params.layers))


def init_params(arch: Architecture, rng: Rng) -> ModelParams:
    """Gaussian weights with variance 1/fan_in, zero biases."""
    gen = rng.generator()
    layers = []
    for s in arch.dense:
        w = gen.standard_normal((s.in_dim, s.out_dim)) / np.sqrt(s.in_dim)
        layers.append(np.concatenate([w.ravel(), np.zeros(s.out_dim)]))
    return ModelParams(arch, tuple(layers))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("inputs must be a non-empty B x d matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("need exactly one label per input row")


@dataclass(frozen=True)
class RegularizerConfig:
    """Norm penalty (lam/2) * pen(||(theta_ext - anchor_ext) * M|| - clip_ref).

    ``penalty`` is ``"square"`` (default, smooth) or ``"abs"``.
    """

    lam: float = 0.0
    clip_ref: float = 1.0
    enabled: bool = False
    penalty: str = "square"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.clip_ref <= 0:
            raise ValueError(f"clip_ref must be > 0, got {self.clip_ref}")
        if self.penalty not in ("square", "abs"):
            raise ValueError(f"penalty must be 'square' or 'abs', got {self.penalty!r}")

    @property
    def active(self) -> bool:
        return self.enabled and self.lam > 0


def _act(fn: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if fn == "tanh" else np.maximum(z, 0.0)


def _act_grad(fn: str, out: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation output
    return 1.0 - out * out if fn == "tanh" else (out > 0).astype(np.float64)


def effective_layers(params: ModelParams, mask: MaskMatrix | None) -> list[np.ndarray]:
    """Forward-pass parameters: extractor layers multiplied by the mask."""
    layers = list(params.layers)
    if mask is not None:
        if len(mask.layers) != params.split:
            raise ValueError(f"mask covers {len(mask.layers)} layers, extractor has {params.split}")
        for j, m in enumerate(mask.layers):
            if m is None:
                continue
            if m.size != layers[j].size:
                raise ValueError(f"mask size {m.size} != layer size {layers[j].size}")
            layers[j] = np.where(m, layers[j], 0.0)
    return layers


def _run(params: ModelParams, layers: list[np.ndarray], x: np.ndarray, start: int = 0,
         stop: int | None = None) -> list[np.ndarray]:
    """Activations entering specs[start:stop], followed by the final output."""
    specs = params.arch.specs
    stop = len(specs) if stop is None else stop
    j = sum(1 for s in specs[:start] if s.kind == "dense")
    acts = [x]
    h = x
    for s in specs[start:stop]:
        if s.kind == "dense":
            w, b = params.unpack(j, layers[j])
            h = h @ w + b
            j += 1
        else:
            h = _act(s.fn, h)
        acts.append(h)
    return acts


def _check_input(params: ModelParams, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != params.arch.in_dim:
        raise ValueError(f"input must be B x {params.arch.in_dim}, got {x.shape}")


def forward(params: ModelParams, batch: Batch | np.ndarray, mask: MaskMatrix | None = None) -> np.ndarray:
    """Logits ``B x classes``, using masked extractor parameters when ``mask`` is given."""
    x = batch.inputs if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
    _check_input(params, x)
    return _run(params, effective_layers(params, mask), x)[-1]


def extract_features(params: ModelParams, x: np.ndarray, mask: MaskMatrix | None = None) -> np.ndarray:
    """Output of the (masked) extractor, i.e. the head's input."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(params, x)
    return _run(params, effective_layers(params, mask), x, 0, params.arch.head_start)[-1]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def cross_entropy_loss(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy."""
    check_finite(logits, "logits")
    labels = _check_labels(labels, logits.shape[1])
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def masked_distance(params: ModelParams, anchor: ModelParams, mask: MaskMatrix | None) -> list[np.ndarray]:
    """Per-layer (theta_ext - anchor_ext) * M."""
    if params.arch != anchor.arch:
        raise ValueError("params and anchor have different architectures")
    d = [a - b for a, b in zip(params.ext, anchor.ext)]
    if mask is not None:
        d = [v if m is None else np.where(m, v, 0.0) for v, m in zip(d, mask.layers)]
    return d


def _penalty(dist: list[np.ndarray], reg: RegularizerConfig) -> tuple[float, float]:
    """(penalty value, ||d||)."""
    norm = float(np.sqrt(sum(float(v @ v) for v in dist)))
    gap = norm - reg.clip_ref
    if reg.penalty == "square":
        return 0.5 * reg.lam * gap * gap, norm
    return 0.5 * reg.lam * abs(gap), norm


def composite_loss(params: ModelParams, anchor: ModelParams, mask: MaskMatrix | None,
                   batch: Batch, reg: RegularizerConfig) -> float:
    """Cross-entropy through the masked forward plus the optional norm penalty."""
    ce = cross_entropy_loss(forward(params, batch, mask), batch.labels)
    if not reg.active:
        return ce
    pen, _ = _penalty(masked_distance(params, anchor, mask), reg)
    return ce + pen


def _backprop(params: ModelParams, layers: list[np.ndarray], acts: list[np.ndarray],
              start: int, labels: np.ndarray, lowest: int) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy of ``acts[-1]`` and gradients for dense layers >= ``lowest``."""
    logits = acts[-1]
    check_finite(logits, "logits")
    labels = _check_labels(labels, logits.shape[1])
    n = len(labels)
    logp = _log_softmax(logits)
    ce = float(-logp[np.arange(n), labels].mean())

    grads = [np.zeros_like(v) for v in params.layers]
    specs = params.arch.specs
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    g /= n
    j = len(params.layers)
    for i in range(len(specs) - 1, start - 1, -1):
        s = specs[i]
        if s.kind == "activation":
            g = g * _act_grad(s.fn, acts[i - start + 1])
            continue
        j -= 1
        grads[j] = np.concatenate([(acts[i - start].T @ g).ravel(), g.sum(axis=0)])
        if j == lowest:
            break
        w, _ = params.unpack(j, layers[j])
        g = g @ w.T
    return ce, grads


def loss_and_grad(params: ModelParams, anchor: ModelParams | None, mask: MaskMatrix | None,
                  batch: Batch, reg: RegularizerConfig, scope: str) -> tuple[float, float, tuple]:
    """Composite loss, its cross-entropy part, and the gradient restricted to ``scope``.

    ``scope`` is ``"extractor"``, ``"classifier"`` or ``"all"``. Gradients of
    layers outside the scope are zero. Extractor gradients flow through the
    masked forward parameters, so pruned coordinates get no data gradient.
    """
    if scope not in (EXTRACTOR, CLASSIFIER, "all"):
        raise ValueError(f"unknown scope {scope!r}")
    _check_input(params, batch.inputs)
    split = params.split
    need_ext = scope in (EXTRACTOR, "all")
    layers = effective_layers(params, mask)
    acts = _run(params, layers, batch.inputs)
    ce, grads = _backprop(params, layers, acts, 0, batch.labels, 0 if need_ext else split)

    if mask is not None:
        for k, m in enumerate(mask.layers):
            if m is not None:
                grads[k] = np.where(m, grads[k], 0.0)

    loss = ce
    if reg.active:
        anchor = anchor if anchor is not None else params
        dist = masked_distance(params, anchor, mask)
        pen, norm = _penalty(dist, reg)
        loss = ce + pen
        if need_ext and norm > 0:
            if reg.penalty == "square":
                coef = reg.lam * (norm - reg.clip_ref) / norm
            else:
                coef = 0.5 * reg.lam * np.sign(norm - reg.clip_ref) / norm
            for k, v in enumerate(dist):
                grads[k] = grads[k] + coef * v

    if scope == CLASSIFIER:
        grads[:split] = [np.zeros_like(v) for v in params.layers[:split]]
    elif scope == EXTRACTOR:
        grads[split:] = [np.zeros_like(v) for v in params.layers[split:]]
    return loss, ce, tuple(grads)


def head_loss_and_grad(params: ModelParams, features: np.ndarray, labels) -> tuple[float, tuple]:
    """Cross-entropy and classifier gradients given precomputed extractor features.

    Equivalent to ``loss_and_grad(..., scope="classifier")`` without a penalty,
    but skips the frozen extractor's forward pass.
    """
    start = params.arch.head_start
    acts = _run(params, list(params.layers), features, start)
    ce, grads = _backprop(params, list(params.layers), acts, start, labels, params.split)
    return ce, tuple(grads)


def backward(params: ModelParams, anchor: ModelParams | None, mask: MaskMatrix | None,
             batch: Batch, reg: RegularizerConfig, scope: str) -> tuple:
    return loss_and_grad(params, anchor, mask, batch, reg, scope)[2]


def sgd_step(params: ModelParams, grads: Sequence[np.ndarray], lr: float, scope: str) -> ModelParams:
    """One plain SGD step on the layers in ``scope``; the other layers are returned as-is."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    split = params.split
    lo, hi = {EXTRACTOR: (0, split), CLASSIFIER: (split, len(params.layers)),
              "all": (0, len(params.layers))}[scope]
    layers = list(params.layers)
    for j in range(lo, hi):
        layers[j] = layers[j] - lr * grads[j]
    return replace(params, layers=tuple(layers))


def predict(params: ModelParams, x: np.ndarray, mask: MaskMatrix | None = None) -> np.ndarray:
    return np.argmax(forward(params, x, mask), axis=1)
