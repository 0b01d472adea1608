"""Conditional Real-NVP deformer with exact inverse and hand-written gradients.

Vectors may be passed one at a time (shape ``(d,)``) or stacked as rows
(shape ``(N, d)``). A condition of ``None`` feeds an all-zero condition to the
conditioners and bypasses condition normalization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from todnet.errors import DegenerateInputError, NumericOverflowError, UsageError


class Half(enum.IntEnum):
    FIRST = 0
    SECOND = 1

    def other(self) -> "Half":
        return Half(1 - self)


@dataclass(frozen=True)
class MlpParams:
    """Weights are stored (out, in); hidden layers use ReLU, the last is affine."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "biases", tuple(self.biases))
        if not self.weights or len(self.weights) != len(self.biases):
            raise UsageError("an MLP needs one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise UsageError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise UsageError(f"layer {i} input width {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_features(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams(tuple(arrays[0::2]), tuple(arrays[1::2]))


@dataclass(frozen=True)
class CouplingLayerParams:
    conditioner: MlpParams
    transformed_half: Half


@dataclass(frozen=True)
class FlowParams:
    dimension: int
    layers: tuple[CouplingLayerParams, ...]
    condition_normalized: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        d = self.dimension
        if d < 2 or d % 2:
            raise UsageError(f"flow dimension must be even and >= 2, got {d}")
        if not self.layers:
            raise UsageError("a flow needs at least one coupling layer")
        for i, layer in enumerate(self.layers):
            p = layer.conditioner
            if p.in_features != d // 2 + d or p.out_features != d:
                raise UsageError(
                    f"coupling layer {i}: conditioner maps {p.in_features}->{p.out_features}, "
                    f"expected {d // 2 + d}->{d}"
                )
            if i and layer.transformed_half == self.layers[i - 1].transformed_half:
                raise UsageError(f"coupling layer {i} does not alternate the transformed half")

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.conditioner.arrays()]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "FlowParams":
        layers, k = [], 0
        for layer in self.layers:
            n = 2 * len(layer.conditioner.weights)
            layers.append(CouplingLayerParams(layer.conditioner.with_arrays(arrays[k:k + n]), layer.transformed_half))
            k += n
        return FlowParams(self.dimension, tuple(layers), self.condition_normalized)


@dataclass(frozen=True)
class MlpDeformerParams:
    """Plain conditional MLP deformer: maps concat(v, c) to a d-vector. Not bijective."""

    dimension: int
    mlp: MlpParams
    condition_normalized: bool = True

    def __post_init__(self):
        d = self.dimension
        if self.mlp.in_features != 2 * d or self.mlp.out_features != d:
            raise UsageError(f"MLP deformer maps {self.mlp.in_features}->{self.mlp.out_features}, expected {2 * d}->{d}")

    def arrays(self) -> list[np.ndarray]:
        return self.mlp.arrays()

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpDeformerParams":
        return MlpDeformerParams(self.dimension, self.mlp.with_arrays(arrays), self.condition_normalized)


Deformer = Union[FlowParams, MlpDeformerParams]


@dataclass(frozen=True)
class FlowGradients:
    """Gradients in the order of ``deformer.arrays()``, plus input/condition gradients.

    ``v`` and ``c`` have the shape of the inputs that produced them; ``c`` is
    None when the flow ran with the zero condition.
    """

    params: tuple[np.ndarray, ...]
    v: np.ndarray
    c: np.ndarray | None


# ---------------------------------------------------------------------------
# construction


def _uniform_layer(rng: np.random.Generator, n_in: int, n_out: int, scale: float = 1.0):
    bound = scale / np.sqrt(n_in)
    w = rng.uniform(-bound, bound, size=(n_out, n_in))
    b = rng.uniform(-bound, bound, size=n_out)
    return w, b


def _init_mlp(rng, widths: Sequence[int], output_scale: float) -> MlpParams:
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        if i == len(widths) - 2:
            if output_scale == 0.0:
                w, b = np.zeros((n_out, n_in)), np.zeros(n_out)
            else:
                w, b = _uniform_layer(rng, n_in, n_out, output_scale)
        else:
            w, b = _uniform_layer(rng, n_in, n_out)
        weights.append(w)
        biases.append(b)
    return MlpParams(tuple(weights), tuple(biases))


def init_flow(
    d: int,
    n_layers: int = 3,
    n_hidden_layers: int = 2,
    hidden_units: int | None = None,
    seed: int = 0,
    condition_normalized: bool = True,
    output_scale: float = 0.0,
) -> FlowParams:
    """Seeded flow whose conditioner output layers are zero, i.e. the identity map.

    A nonzero `output_scale` draws the output layers like the hidden ones
    (times the scale) instead; tests use it to get non-trivial flows.
    """
    if d < 2 or d % 2:
        raise UsageError(f"flow dimension must be even and >= 2, got {d}")
    if n_layers < 1 or n_hidden_layers < 1:
        raise UsageError("n_layers and n_hidden_layers must be >= 1")
    hidden_units = 2 * d if hidden_units is None else hidden_units
    if hidden_units < 1:
        raise UsageError("hidden_units must be >= 1")
    rng = np.random.default_rng(seed)
    widths = [d // 2 + d] + [hidden_units] * n_hidden_layers + [d]
    layers = []
    half = Half.SECOND
    for _ in range(n_layers):
        layers.append(CouplingLayerParams(_init_mlp(rng, widths, output_scale), half))
        half = half.other()
    return FlowParams(d, tuple(layers), condition_normalized)


def init_mlp_deformer(
    d: int,
    n_hidden_layers: int = 4,
    hidden_units: int | None = None,
    seed: int = 0,
    condition_normalized: bool = True,
) -> MlpDeformerParams:
    if d < 2 or d % 2:
        raise UsageError(f"deformer dimension must be even and >= 2, got {d}")
    hidden_units = 2 * d if hidden_units is None else hidden_units
    rng = np.random.default_rng(seed)
    widths = [2 * d] + [hidden_units] * n_hidden_layers + [d]
    # The output layer cannot start at zero: a zero output has no direction.
    return MlpDeformerParams(d, _init_mlp(rng, widths, output_scale=1.0), condition_normalized)


# ---------------------------------------------------------------------------
# MLP


def _mlp_run(p: MlpParams, x: np.ndarray, keep: bool = False):
    acts = [x] if keep else None
    last = len(p.weights) - 1
    h = x
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
        if keep:
            acts.append(h)
    return h, acts


def _mlp_grad(p: MlpParams, acts: list[np.ndarray], g: np.ndarray):
    n = len(p.weights)
    grads: list[np.ndarray] = [None] * (2 * n)  # type: ignore[list-item]
    for i in reversed(range(n)):
        if i < n - 1:
            g = g * (acts[i + 1] > 0.0)
        grads[2 * i] = g.T @ acts[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ p.weights[i]
    return grads, g


def mlp_forward(p: MlpParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Run a coupling conditioner and split its output into (s, t)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.in_features:
        raise UsageError(f"conditioner expects input width {p.in_features}, got {x.shape[-1]}")
    if p.out_features % 2:
        raise UsageError("conditioner output width must be even")
    out, _ = _mlp_run(p, np.atleast_2d(x))
    h = p.out_features // 2
    s, t = out[:, :h], out[:, h:]
    if x.ndim == 1:
        return s[0], t[0]
    return s, t


# ---------------------------------------------------------------------------
# coupling layers


def _slices(half: Half, h: int) -> tuple[slice, slice]:
    """(untouched, transformed) coordinate ranges."""
    if half == Half.SECOND:
        return slice(0, h), slice(h, 2 * h)
    return slice(h, 2 * h), slice(0, h)


def _scale_shift(layer: CouplingLayerParams, key: np.ndarray, c: np.ndarray, keep: bool):
    out, acts = _mlp_run(layer.conditioner, np.concatenate([key, c], axis=1), keep)
    h = key.shape[1]
    s, t = out[:, :h], out[:, h:]
    with np.errstate(over="ignore", invalid="ignore"):
        scale = np.exp(s)
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(t))):
        raise NumericOverflowError("coupling conditioner produced a non-finite scale or shift")
    return scale, t, acts


def _coupling_run(layer, v, c, keep=False):
    keep_sl, move_sl = _slices(layer.transformed_half, v.shape[1] // 2)
    scale, t, acts = _scale_shift(layer, v[:, keep_sl], c, keep)
    z = v.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        z[:, move_sl] = v[:, move_sl] * scale + t
    if not np.all(np.isfinite(z[:, move_sl])):
        raise NumericOverflowError("coupling output overflowed")
    return z, (acts, scale) if keep else None


def _coupling_inverse_run(layer, z, c):
    keep_sl, move_sl = _slices(layer.transformed_half, z.shape[1] // 2)
    scale, t, _ = _scale_shift(layer, z[:, keep_sl], c, False)
    v = z.copy()
    v[:, move_sl] = (z[:, move_sl] - t) / scale
    return v


def _rows(x, d: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != d:
        raise UsageError(f"{what} has shape {x.shape}, expected ({d},) or (N, {d})")
    return np.atleast_2d(x)


def _condition_rows(c, n: int, d: int, normalize: bool):
    """Broadcast the condition to n rows; returns (conditioner input, norms or None)."""
    if c is None:
        return np.zeros((n, d)), None
    c = _rows(c, d, "condition")
    if c.shape[0] not in (1, n):
        raise UsageError(f"condition has {c.shape[0]} rows, expected 1 or {n}")
    c = np.broadcast_to(c, (n, d))
    if not normalize:
        return np.ascontiguousarray(c), None
    norms = np.sqrt((c * c).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm condition")
    return c / norms, norms


def _layer_check(layer: CouplingLayerParams, d: int):
    if layer.conditioner.in_features != d // 2 + d or layer.conditioner.out_features != d:
        raise UsageError(f"coupling layer does not match dimension {d}")


def coupling_forward(layer: CouplingLayerParams, v, c):
    """One affine coupling: copy one half, scale-and-shift the other.

    `c` is used as given (no normalization happens at the layer level).
    """
    v_arr = np.asarray(v, dtype=np.float64)
    d = v_arr.shape[-1]
    _layer_check(layer, d)
    rows = _rows(v_arr, d, "v")
    cond, _ = _condition_rows(c, rows.shape[0], d, normalize=False)
    z, _ = _coupling_run(layer, rows, cond)
    return z[0] if v_arr.ndim == 1 else z


def coupling_inverse(layer: CouplingLayerParams, z, c):
    z_arr = np.asarray(z, dtype=np.float64)
    d = z_arr.shape[-1]
    _layer_check(layer, d)
    rows = _rows(z_arr, d, "z")
    cond, _ = _condition_rows(c, rows.shape[0], d, normalize=False)
    v = _coupling_inverse_run(layer, rows, cond)
    return v[0] if z_arr.ndim == 1 else v


# ---------------------------------------------------------------------------
# whole flow


def flow_forward(flow: FlowParams, v, c):
    v_arr = np.asarray(v, dtype=np.float64)
    rows = _rows(v_arr, flow.dimension, "v")
    cond, _ = _condition_rows(c, rows.shape[0], flow.dimension, flow.condition_normalized)
    z = rows
    for layer in flow.layers:
        z, _ = _coupling_run(layer, z, cond)
    return z[0] if v_arr.ndim == 1 else z


def flow_inverse(flow: FlowParams, z, c):
    z_arr = np.asarray(z, dtype=np.float64)
    rows = _rows(z_arr, flow.dimension, "z")
    cond, _ = _condition_rows(c, rows.shape[0], flow.dimension, flow.condition_normalized)
    v = rows
    for layer in reversed(flow.layers):
        v = _coupling_inverse_run(layer, v, cond)
    return v[0] if z_arr.ndim == 1 else v


def flow_backward(flow: FlowParams, v, c, upstream) -> FlowGradients:
    """Reverse-mode gradient of ``<upstream, flow_forward(flow, v, c)>``.

    Parameter gradients are summed over rows; input and condition gradients
    are per row.
    """
    v_arr = np.asarray(v, dtype=np.float64)
    d = flow.dimension
    rows = _rows(v_arr, d, "v")
    g = _rows(upstream, d, "upstream")
    if g.shape != rows.shape:
        raise UsageError(f"upstream has shape {g.shape}, expected {rows.shape}")
    n = rows.shape[0]
    cond, norms = _condition_rows(c, n, d, flow.condition_normalized)

    inputs, caches = [], []
    z = rows
    for layer in flow.layers:
        inputs.append(z)
        z, cache = _coupling_run(layer, z, cond, keep=True)
        caches.append(cache)

    h = d // 2
    g = g.copy()
    g_cond = np.zeros((n, d))
    param_grads: list[list[np.ndarray]] = []
    for layer, u, (acts, scale) in zip(reversed(flow.layers), reversed(inputs), reversed(caches)):
        keep_sl, move_sl = _slices(layer.transformed_half, h)
        g_move = g[:, move_sl]
        d_out = np.concatenate([g_move * u[:, move_sl] * scale, g_move], axis=1)
        grads, dx = _mlp_grad(layer.conditioner, acts, d_out)
        param_grads.append(grads)
        g_new = np.empty_like(g)
        g_new[:, move_sl] = g_move * scale
        g_new[:, keep_sl] = g[:, keep_sl] + dx[:, :h]
        g_cond += dx[:, h:]
        g = g_new
    flat = tuple(a for grads in reversed(param_grads) for a in grads)

    g_c = None
    if c is not None:
        if norms is not None:
            # d(c/|c|)/dc = (I - c_hat c_hat^T) / |c|
            g_c = (g_cond - cond * (cond * g_cond).sum(axis=1, keepdims=True)) / norms
        else:
            g_c = g_cond
        c_arr = np.asarray(c, dtype=np.float64)
        if c_arr.ndim == 1 or c_arr.shape[0] == 1 and n > 1:
            # Shared condition: its gradient accumulates over rows.
            g_c = g_c.sum(axis=0).reshape(c_arr.shape)
        elif v_arr.ndim == 1:
            g_c = g_c[0]
    g_v = g[0] if v_arr.ndim == 1 else g
    return FlowGradients(flat, g_v, g_c)


def deformed_similarity(flow: FlowParams, query, target, condition) -> float:
    """Cosine similarity after deforming both vectors under the same condition."""
    q = np.asarray(query, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if q.ndim != 1 or t.ndim != 1:
        raise UsageError("deformed_similarity takes single vectors")
    a = flow_forward(flow, q, condition)
    b = flow_forward(flow, t, condition)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("deformed vector has zero norm")
    return float(np.dot(a / na, b / nb))


# ---------------------------------------------------------------------------
# MLP deformer


def mlp_deformer_forward(p: MlpDeformerParams, v, c):
    v_arr = np.asarray(v, dtype=np.float64)
    rows = _rows(v_arr, p.dimension, "v")
    cond, _ = _condition_rows(c, rows.shape[0], p.dimension, p.condition_normalized)
    out, _ = _mlp_run(p.mlp, np.concatenate([rows, cond], axis=1))
    return out[0] if v_arr.ndim == 1 else out


def mlp_deformer_backward(p: MlpDeformerParams, v, c, upstream) -> FlowGradients:
    v_arr = np.asarray(v, dtype=np.float64)
    d = p.dimension
    rows = _rows(v_arr, d, "v")
    g = _rows(upstream, d, "upstream")
    if g.shape != rows.shape:
        raise UsageError(f"upstream has shape {g.shape}, expected {rows.shape}")
    cond, norms = _condition_rows(c, rows.shape[0], d, p.condition_normalized)
    _, acts = _mlp_run(p.mlp, np.concatenate([rows, cond], axis=1), keep=True)
    grads, dx = _mlp_grad(p.mlp, acts, g)
    g_v, g_cond = dx[:, :d], dx[:, d:]
    g_c = None
    if c is not None:
        g_c = g_cond if norms is None else (g_cond - cond * (cond * g_cond).sum(axis=1, keepdims=True)) / norms
        c_arr = np.asarray(c, dtype=np.float64)
        if c_arr.ndim == 1 or c_arr.shape[0] == 1 and rows.shape[0] > 1:
            g_c = g_c.sum(axis=0).reshape(c_arr.shape)
        elif v_arr.ndim == 1:
            g_c = g_c[0]
    return FlowGradients(tuple(grads), g_v[0] if v_arr.ndim == 1 else g_v, g_c)


# ---------------------------------------------------------------------------
# dispatch used by the loss and evaluation code


def deform(deformer: Deformer, v, c):
    if isinstance(deformer, FlowParams):
        return flow_forward(deformer, v, c)
    return mlp_deformer_forward(deformer, v, c)


def deform_backward(deformer: Deformer, v, c, upstream) -> FlowGradients:
    if isinstance(deformer, FlowParams):
        return flow_backward(deformer, v, c, upstream)
    return mlp_deformer_backward(deformer, v, c, upstream)
