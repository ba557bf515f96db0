"""Per-layer magnitude top-k masks, masked forward parameters and masked deltas.

A *layer* here is the flat parameter vector of one dense layer (weights in
row-major order followed by the bias). Masks are boolean vectors of the same
length; ``None`` in a mask slot marks a dense (unmasked) layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal
from typing import Sequence

import numpy as np

from .tensor import l2_norm


def retained_count(n: int, sparsity: float) -> int:
    """Number of coordinates kept in a layer of size ``n``: ceil(S*n), at least 1.

    The product is evaluated in decimal so that e.g. S=0.7, n=10 keeps exactly 7
    rather than the 8 a binary-float ceil would give.
    """
    return max(1, math.ceil(Decimal(repr(float(sparsity))) * n))


def _check_sparsity(sparsity: float) -> None:
    if not (0.0 < sparsity <= 1.0):
        raise ValueError(f"sparsity must lie in (0, 1], got {sparsity}")


def topk_mask(values: np.ndarray, sparsity: float) -> np.ndarray:
    """Boolean mask of the ceil(S*n) largest-magnitude entries of a flat vector.

    Ties are broken toward the lower flat index.
    """
    _check_sparsity(sparsity)
    flat = np.ravel(values)
    keep = retained_count(flat.size, sparsity)
    mask = np.zeros(flat.size, dtype=bool)
    if keep >= flat.size:
        mask[:] = True
        return mask
    mag = np.abs(flat)
    # k-th largest magnitude; everything above it is kept, ties at it go to lower indices
    kth = np.partition(mag, flat.size - keep)[flat.size - keep]
    above = mag > kth
    mask[above] = True
    ties = np.flatnonzero(mag == kth)
    mask[ties[: keep - int(np.count_nonzero(above))]] = True
    return mask


@dataclass(frozen=True)
class MaskMatrix:
    """Masks for the extractor layers.

    Attributes:
        layers: one boolean vector per extractor layer, or ``None`` for the
            leading ``dense_prefix`` layers which are never masked.
        sparsity: retained fraction S.
        dense_prefix: number of leading extractor layers kept dense.
        step: local iteration that produced the mask.
    """

    layers: tuple
    sparsity: float
    dense_prefix: int
    step: int = 0

    def __post_init__(self):
        for j, m in enumerate(self.layers):
            if (m is None) != (j < self.dense_prefix):
                raise ValueError("exactly the first dense_prefix layers must be unmasked")

    @classmethod
    def dense(cls, sizes: Sequence[int]) -> "MaskMatrix":
        """All-dense mask (used when reparameterization is switched off)."""
        return cls(tuple(None for _ in sizes), 1.0, len(sizes))

    def layer(self, j: int, size: int) -> np.ndarray:
        """Materialized 0/1 float mask for layer ``j``."""
        m = self.layers[j]
        return np.ones(size) if m is None else m.astype(np.float64)

    def popcounts(self) -> list[int | None]:
        return [None if m is None else int(np.count_nonzero(m)) for m in self.layers]


def compute_mask(params_ext: Sequence[np.ndarray], sparsity: float,
                 dense_prefix: int = 0, step: int = 0) -> MaskMatrix:
    """Top-k magnitude mask for every extractor layer at index >= ``dense_prefix``."""
    _check_sparsity(sparsity)
    if not (0 <= dense_prefix <= len(params_ext)):
        raise ValueError(
            f"dense_prefix must be in [0, {len(params_ext)}], got {dense_prefix}")
    layers = tuple(
        None if j < dense_prefix else topk_mask(p, sparsity)
        for j, p in enumerate(params_ext)
    )
    return MaskMatrix(layers, float(sparsity), int(dense_prefix), step)


def _check_layers(params: Sequence[np.ndarray], mask: MaskMatrix) -> None:
    if len(params) != len(mask.layers):
        raise ValueError(f"mask has {len(mask.layers)} layers, params have {len(params)}")
    for p, m in zip(params, mask.layers):
        if m is not None and np.size(p) != m.size:
            raise ValueError(f"mask size {m.size} does not match layer size {np.size(p)}")


def reparameterized_forward_params(params_ext: Sequence[np.ndarray],
                                   mask: MaskMatrix | None) -> list[np.ndarray]:
    """Parameters actually used in the forward pass: dense prefix verbatim, the rest masked."""
    if mask is None:
        return [np.array(p, dtype=np.float64) for p in params_ext]
    _check_layers(params_ext, mask)
    return [np.array(p, dtype=np.float64) if m is None else np.where(m, p, 0.0)
            for p, m in zip(params_ext, mask.layers)]


@dataclass(frozen=True)
class SparseDelta:
    """An update vector per layer, with the mask that produced it.

    ``mask`` is ``None`` for a fully dense update (e.g. the full-model baseline).
    ``norm`` is the L2 norm over all returned coordinates.
    """

    layers: tuple
    mask: MaskMatrix | None
    norm: float

    @classmethod
    def from_layers(cls, layers, mask: MaskMatrix | None) -> "SparseDelta":
        layers = tuple(np.asarray(v, dtype=np.float64) for v in layers)
        return cls(layers, mask, l2_norm(np.concatenate(layers)) if layers else 0.0)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.layers)

    def support(self) -> np.ndarray:
        """Boolean vector of coordinates allowed to be nonzero."""
        if self.mask is None:
            return np.ones(sum(v.size for v in self.layers), dtype=bool)
        return np.concatenate([
            np.ones(v.size, dtype=bool) if m is None else m
            for v, m in zip(self.layers, self.mask.layers)
        ])

    def nnz_budget(self) -> int:
        return int(np.count_nonzero(self.support()))


def masked_update(theta_final: Sequence[np.ndarray], theta_anchor: Sequence[np.ndarray],
                  mask_final: MaskMatrix | None) -> SparseDelta:
    """(final - anchor) masked by the final-step mask; dense-prefix layers unmasked."""
    if len(theta_final) != len(theta_anchor):
        raise ValueError("final and anchor parameters have different layer counts")
    diffs = []
    for a, b in zip(theta_final, theta_anchor):
        if np.shape(a) != np.shape(b):
            raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
        diffs.append(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    if mask_final is not None:
        _check_layers(diffs, mask_final)
        diffs = [d if m is None else np.where(m, d, 0.0)
                 for d, m in zip(diffs, mask_final.layers)]
    return SparseDelta.from_layers(diffs, mask_final)
