"""Numerical self-checks on a flow: round-trip error and finite-difference gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from todnet.flow import FlowParams, flow_backward, flow_forward, flow_inverse

FD_STEP = 1e-5
# Relative error uses max(|analytic|, |numeric|, GRAD_FLOOR) as denominator so
# that exactly-zero and roundoff-level gradients are not judged relatively.
GRAD_FLOOR = 1e-6


def random_pairs(d: int, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """n unit-norm (v, c) pairs, like the embeddings a flow sees in practice."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, d))
    c = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True), c / np.linalg.norm(c, axis=1, keepdims=True)


@dataclass(frozen=True)
class RoundTripReport:
    forward_inverse: float
    inverse_forward: float


def roundtrip_errors(flow: FlowParams, v: np.ndarray, c: np.ndarray) -> RoundTripReport:
    """Max-abs errors of inverse(forward(v)) - v and forward(inverse(v)) - v."""
    fi = np.max(np.abs(flow_inverse(flow, flow_forward(flow, v, c), c) - v))
    inv = np.max(np.abs(flow_forward(flow, flow_inverse(flow, v, c), c) - v))
    return RoundTripReport(float(fi), float(inv))


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    n_checked: int


def fd_gradient_check(
    flow: FlowParams,
    v: np.ndarray,
    c: np.ndarray,
    upstream: np.ndarray,
    max_param_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare flow_backward with central differences of <upstream, flow_forward>.

    Checks every input and condition coordinate and either every parameter
    coordinate or a seeded random sample of `max_param_coords` of them.
    """
    def objective(f, vv, cc):
        return float(np.dot(upstream, flow_forward(f, vv, cc)))

    grads = flow_backward(flow, v, c, upstream)
    arrays = flow.arrays()
    coords = [(i, idx) for i, a in enumerate(arrays) for idx in np.ndindex(a.shape)]
    if max_param_coords is not None and max_param_coords < len(coords):
        rng = np.random.default_rng(seed)
        coords = [coords[k] for k in sorted(rng.choice(len(coords), max_param_coords, replace=False))]

    worst, n = 0.0, 0
    for i, idx in coords:
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[i][idx] += FD_STEP
        minus[i][idx] -= FD_STEP
        numeric = (objective(flow.with_arrays(plus), v, c) - objective(flow.with_arrays(minus), v, c)) / (2 * FD_STEP)
        worst = max(worst, relative_error(float(grads.params[i][idx]), numeric))
        n += 1
    for which, analytic in (("v", grads.v), ("c", grads.c)):
        for k in range(flow.dimension):
            e = np.zeros(flow.dimension)
            e[k] = FD_STEP
            if which == "v":
                numeric = (objective(flow, v + e, c) - objective(flow, v - e, c)) / (2 * FD_STEP)
            else:
                numeric = (objective(flow, v, c + e) - objective(flow, v, c - e)) / (2 * FD_STEP)
            worst = max(worst, relative_error(float(analytic[k]), numeric))
            n += 1
    return GradCheckReport(worst, n)
