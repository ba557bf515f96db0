"""Portable little-endian binary files for model parameters and sparse updates.

Layout (all integers unsigned little-endian)::

    offset  size  field
    0       4     magic b"PFDS"
    4       2     version (1)
    6       2     kind: 0 = ModelParams, 1 = SparseDelta
    8       4     record count R (specs for kind 0, layers for kind 1)

    kind 0 continues with
    12      4     dense layer count L
    16      4     split (index of the first classifier dense layer)
    20      12*R  spec table, per spec: u8 kind (0 dense, 1 activation),
                  u8 role (0 extractor, 1 classifier), u8 fn (0 tanh, 1 relu),
                  u8 pad, u32 in_dim, u32 out_dim
    ...           L layer blocks of float64: in*out weights (row-major), then out biases

    kind 1 continues with
    12      8*R   u64 length of each layer
    ...     8     f64 sparsity
    ...     4     u32 dense_prefix
    ...     4     u32 step
    ...     1     u8 has_mask
    ...           R layer blocks of float64 values
    ...           mask section (only if has_mask), per layer: u8 masked flag, then
                  ceil(n/8) bytes of little-endian bit order bitmap when flagged
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import Architecture, LayerSpec, ModelParams
from .sparsify import MaskMatrix, SparseDelta

MAGIC = b"PFDS"
VERSION = 1
_KINDS = {"dense": 0, "activation": 1}
_ROLES = {"extractor": 0, "classifier": 1}
_FNS = {"tanh": 0, "relu": 1}


class CheckpointError(ValueError):
    pass


def _inv(d: dict) -> dict:
    return {v: k for k, v in d.items()}


def params_to_bytes(params: ModelParams) -> bytes:
    specs = params.arch.specs
    out = [MAGIC, struct.pack("<HHIII", VERSION, 0, len(specs), len(params.layers), params.split)]
    for s in specs:
        out.append(struct.pack("<BBBxII", _KINDS[s.kind], _ROLES[s.role], _FNS[s.fn], s.in_dim, s.out_dim))
    out += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.layers]
    return b"".join(out)


def _header(buf: bytes, kind: int) -> int:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, got, count = struct.unpack_from("<HHI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    if got != kind:
        raise CheckpointError(f"expected record kind {kind}, found {got}")
    return count


def _floats(buf: bytes, off: int, n: int) -> tuple[np.ndarray, int]:
    end = off + 8 * n
    if end > len(buf):
        raise CheckpointError(f"truncated float block at byte {off}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64), end


def params_from_bytes(buf: bytes) -> ModelParams:
    n_specs = _header(buf, 0)
    n_dense, split = struct.unpack_from("<II", buf, 12)
    off = 20
    kinds, roles, fns = _inv(_KINDS), _inv(_ROLES), _inv(_FNS)
    specs = []
    for _ in range(n_specs):
        k, r, f, a, b = struct.unpack_from("<BBBxII", buf, off)
        specs.append(LayerSpec(kinds[k], a, b, roles[r], fns[f]))
        off += 12
    arch = Architecture(tuple(specs))
    if len(arch.dense) != n_dense or arch.split != split:
        raise CheckpointError("header layer count or split disagrees with the spec table")
    layers = []
    for n in arch.layer_sizes:
        v, off = _floats(buf, off, n)
        layers.append(v)
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes")
    return ModelParams(arch, tuple(layers))


def delta_to_bytes(delta: SparseDelta) -> bytes:
    mask = delta.mask
    out = [MAGIC, struct.pack("<HHI", VERSION, 1, len(delta.layers))]
    out += [struct.pack("<Q", v.size) for v in delta.layers]
    out.append(struct.pack("<dIIB", mask.sparsity if mask else 1.0, mask.dense_prefix if mask else 0,
                           mask.step if mask else 0, mask is not None))
    out += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in delta.layers]
    if mask is not None:
        for m in mask.layers:
            if m is None:
                out.append(b"\x00")
            else:
                out.append(b"\x01" + np.packbits(m, bitorder="little").tobytes())
    return b"".join(out)


def delta_from_bytes(buf: bytes) -> SparseDelta:
    count = _header(buf, 1)
    sizes = struct.unpack_from(f"<{count}Q", buf, 12)
    off = 12 + 8 * count
    sparsity, prefix, step, has_mask = struct.unpack_from("<dIIB", buf, off)
    off += struct.calcsize("<dIIB")
    layers = []
    for n in sizes:
        v, off = _floats(buf, off, n)
        layers.append(v)
    mask = None
    if has_mask:
        masks = []
        for n in sizes:
            flag = buf[off]
            off += 1
            if flag:
                nb = (n + 7) // 8
                masks.append(np.unpackbits(np.frombuffer(buf, np.uint8, nb, off), count=n,
                                           bitorder="little").astype(bool))
                off += nb
            else:
                masks.append(None)
        mask = MaskMatrix(tuple(masks), sparsity, prefix, step)
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes")
    return SparseDelta.from_layers(layers, mask)


def save_params(params: ModelParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())


def save_delta(delta: SparseDelta, path) -> None:
    Path(path).write_bytes(delta_to_bytes(delta))


def load_delta(path) -> SparseDelta:
    return delta_from_bytes(Path(path).read_bytes())
