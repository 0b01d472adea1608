"""Binary "TODF" checkpoints for deformer parameters.

Layout (little-endian throughout)::

    b"TODF"
    u16 version (= 1)
    u16 flags          bit 0: condition normalized; bit 1: MLP deformer
    u32 d
    u32 n_layers       coupling layers (1 for the MLP deformer)
    per layer:
        u8  transformed half (0 first, 1 second; 0 for the MLP deformer)
        u32 n_linear
        n_linear x (u32 out, u32 in)
    all weights and biases as f64, layer order, each linear map's weight
    (row-major) followed by its bias.

Saving, loading and saving again yields identical bytes.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from todnet.errors import (
    BadMagicError,
    LayerShapeError,
    OddDimensionError,
    TrailingDataError,
    TruncatedFileError,
    UnsupportedVersionError,
    UsageError,
)
from todnet.flow import CouplingLayerParams, Deformer, FlowParams, Half, MlpDeformerParams, MlpParams

MAGIC = b"TODF"
VERSION = 1
FLAG_NORMALIZED = 1
FLAG_MLP = 2


def _mlp_layers(deformer: Deformer) -> list[tuple[int, MlpParams]]:
    if isinstance(deformer, FlowParams):
        return [(int(layer.transformed_half), layer.conditioner) for layer in deformer.layers]
    return [(0, deformer.mlp)]


def checkpoint_bytes(deformer: Deformer) -> bytes:
    flags = FLAG_NORMALIZED if deformer.condition_normalized else 0
    if isinstance(deformer, MlpDeformerParams):
        flags |= FLAG_MLP
    layers = _mlp_layers(deformer)
    parts = [MAGIC, struct.pack("<HHII", VERSION, flags, deformer.dimension, len(layers))]
    for half, mlp in layers:
        parts.append(struct.pack("<BI", half, len(mlp.weights)))
        for out, inp in mlp.shapes:
            parts.append(struct.pack("<II", out, inp))
    for _, mlp in layers:
        for w, b in zip(mlp.weights, mlp.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(deformer: Deformer, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(deformer))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(data: bytes) -> Deformer:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a TODF checkpoint (bad magic)")
    version, flags, d, n_layers = r.unpack("<HHII", "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported TODF version {version}")
    if flags & ~(FLAG_NORMALIZED | FLAG_MLP):
        raise LayerShapeError(f"unknown TODF flags {flags:#x}")
    if d < 2 or d % 2:
        raise OddDimensionError(f"checkpoint dimension must be even and >= 2, got {d}")
    is_mlp = bool(flags & FLAG_MLP)
    if n_layers < 1 or (is_mlp and n_layers != 1):
        raise LayerShapeError(f"invalid layer count {n_layers}")
    headers = []
    for i in range(n_layers):
        half, n_linear = r.unpack("<BI", f"layer {i} header")
        if half > 1 or n_linear < 1:
            raise LayerShapeError(f"layer {i}: invalid header (half={half}, n_linear={n_linear})")
        # Shapes are bounded by the remaining payload before anything is allocated.
        if n_linear * 8 > len(data) - r.pos:
            raise TruncatedFileError(f"checkpoint truncated in layer {i} shapes")
        shapes = [r.unpack("<II", f"layer {i} shape") for _ in range(n_linear)]
        headers.append((half, shapes))
    mlps = []
    for i, (half, shapes) in enumerate(headers):
        weights, biases = [], []
        for j, (out, inp) in enumerate(shapes):
            raw = r.take(8 * (out * inp + out), f"layer {i} linear {j} values")
            vals = np.frombuffer(raw, dtype="<f8").astype(np.float64)
            weights.append(vals[: out * inp].reshape(out, inp))
            biases.append(vals[out * inp:])
        try:
            mlps.append((half, MlpParams(tuple(weights), tuple(biases))))
        except UsageError as exc:
            raise LayerShapeError(f"layer {i}: {exc}") from None
    if r.pos != len(data):
        raise TrailingDataError(f"{len(data) - r.pos} unexpected bytes after checkpoint payload")
    normalized = bool(flags & FLAG_NORMALIZED)
    try:
        if is_mlp:
            return MlpDeformerParams(d, mlps[0][1], normalized)
        layers = tuple(CouplingLayerParams(mlp, Half(half)) for half, mlp in mlps)
        return FlowParams(d, layers, normalized)
    except UsageError as exc:
        raise LayerShapeError(str(exc)) from None


def load_checkpoint(path: str | os.PathLike) -> Deformer:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
