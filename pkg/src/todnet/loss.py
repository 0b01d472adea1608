"""Pairwise scoring under a deformer and the hardest-negative hinge rank loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from todnet.core_types import Condition, GroupedEmbeddings, Modality, cosine_rows
from todnet.errors import UsageError
from todnet.flow import Deformer, deform, deform_backward

# Upper bound on deformed rows held in memory at once.
CHUNK_ROWS = 16384


@dataclass(frozen=True)
class SimilarityMatrix:
    scores: np.ndarray
    positive_mask: np.ndarray

    def __post_init__(self):
        if self.scores.ndim != 2 or self.scores.shape != self.positive_mask.shape:
            raise UsageError("scores and positive_mask must be 2-D arrays of the same shape")
        if not np.all(np.isfinite(self.scores)):
            raise UsageError("similarity scores must be finite")
        if not np.all(self.positive_mask.any(axis=1)):
            raise UsageError("every query row needs at least one positive")


@dataclass(frozen=True)
class HingeRouting:
    """Which entries of the similarity matrix carry gradient.

    One entry per (row, positive) pair: `rows[k]`, `positives[k]` and the
    row's hardest negative `negatives[k]`; `active[k]` marks a positive hinge.
    """

    shape: tuple[int, int]
    rows: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    active: np.ndarray

    def grad_scores(self) -> np.ndarray:
        """d(loss)/d(scores) as a dense matrix."""
        g = np.zeros(self.shape)
        n = len(self.rows)
        if n == 0:
            return g
        r, p, q = self.rows[self.active], self.positives[self.active], self.negatives[self.active]
        np.add.at(g, (r, q), 1.0 / n)
        np.add.at(g, (r, p), -1.0 / n)
        return g


def hinge_hardest_loss(sims: SimilarityMatrix, margin: float) -> tuple[float, HingeRouting]:
    """Mean over (query, positive) pairs of the hinge against the row's hardest negative.

    Sibling positives never act as negatives; ties between negatives go to the
    lowest column.
    """
    if margin < 0:
        raise UsageError("margin must be nonnegative")
    s, mask = sims.scores, sims.positive_mask
    if not np.all((~mask).any(axis=1)):
        raise UsageError("every query row needs at least one negative")
    hardest = np.argmax(np.where(mask, -np.inf, s), axis=1)
    rows, positives = np.nonzero(mask)
    negatives = hardest[rows]
    hinge = s[rows, negatives] - s[rows, positives] + margin
    active = hinge > 0.0
    loss = float(np.where(active, hinge, 0.0).mean())
    return loss, HingeRouting(s.shape, rows, positives, negatives, active)


def _role(condition: Condition, query_modality: Modality) -> str:
    """Resolve a condition mode to 'target', 'query' or 'none' for one direction."""
    if condition == Condition.TARGET:
        return "target"
    if condition == Condition.QUERY:
        return "query"
    if condition == Condition.NONE:
        return "none"
    wanted = Modality.CAPTION if condition == Condition.CAPTION else Modality.IMAGE
    return "query" if query_modality == wanted else "target"


def _deform_chunked(deformer, v, c):
    if len(v) <= CHUNK_ROWS:
        return deform(deformer, v, c)
    parts = []
    for k in range(0, len(v), CHUNK_ROWS):
        parts.append(deform(deformer, v[k:k + CHUNK_ROWS], None if c is None else c[k:k + CHUNK_ROWS]))
    return np.concatenate(parts)


def _conditioned_scores(deformer, fixed, paired, fixed_is_query: bool) -> np.ndarray:
    """Scores where each `fixed` vector is its own condition.

    Entry (i, j) of the result is cos(D_{f_i}(f_i), D_{f_i}(p_j)) laid out as
    (len(fixed), len(paired)).
    """
    d_fixed = deform(deformer, fixed, fixed)
    n_p = len(paired)
    out = np.empty((len(fixed), n_p))
    step = max(1, CHUNK_ROWS // max(n_p, 1))
    for k in range(0, len(fixed), step):
        f = fixed[k:k + step]
        cond = np.repeat(f, n_p, axis=0)
        d_paired = deform(deformer, np.tile(paired, (len(f), 1)), cond)
        d_f = np.repeat(d_fixed[k:k + step], n_p, axis=0)
        if fixed_is_query:
            out[k:k + step] = cosine_rows(d_f, d_paired).reshape(len(f), n_p)
        else:
            out[k:k + step] = cosine_rows(d_paired, d_f).reshape(len(f), n_p)
    return out


def _plain_scores(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((len(a), len(b)))
    step = max(1, CHUNK_ROWS // max(len(b), 1))
    for k in range(0, len(a), step):
        blk = a[k:k + step]
        out[k:k + step] = cosine_rows(np.repeat(blk, len(b), axis=0), np.tile(b, (len(blk), 1))).reshape(len(blk), len(b))
    return out


def pair_scores(deformer: Deformer | None, queries, targets, condition: Condition, query_modality: Modality) -> np.ndarray:
    """Query-by-target score table; a `deformer` of None gives plain cosine."""
    queries = np.asarray(queries, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if queries.ndim != 2 or targets.ndim != 2 or queries.shape[1] != targets.shape[1]:
        raise UsageError("queries and targets must be (N, d) arrays of equal width")
    if deformer is None:
        return _plain_scores(queries, targets)
    if deformer.dimension != queries.shape[1]:
        raise UsageError(f"deformer dimension {deformer.dimension} != embedding dimension {queries.shape[1]}")
    role = _role(condition, query_modality)
    if role == "none":
        return _plain_scores(_deform_chunked(deformer, queries, None), _deform_chunked(deformer, targets, None))
    if role == "query":
        return _conditioned_scores(deformer, queries, targets, fixed_is_query=True)
    return _conditioned_scores(deformer, targets, queries, fixed_is_query=False).T


def batch_similarity(
    deformer: Deformer | None,
    queries,
    targets,
    condition: Condition,
    query_modality: Modality,
    query_groups,
    target_groups,
) -> SimilarityMatrix:
    scores = pair_scores(deformer, queries, targets, condition, query_modality)
    mask = np.asarray(query_groups)[:, None] == np.asarray(target_groups)[None, :]
    return SimilarityMatrix(scores, mask)


def _cos_grads(a: np.ndarray, b: np.ndarray):
    """Row-wise gradients of cos(a, b) with respect to a and b."""
    na = np.sqrt((a * a).sum(axis=1, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=1, keepdims=True))
    cos = (a * b).sum(axis=1, keepdims=True) / (na * nb)
    ga = b / (na * nb) - cos * a / (na * na)
    gb = a / (na * nb) - cos * b / (nb * nb)
    return ga, gb


def _add(acc: list[np.ndarray] | None, grads) -> list[np.ndarray]:
    if acc is None:
        return [g.copy() for g in grads]
    for a, g in zip(acc, grads):
        a += g
    return acc


def pair_scores_vjp(
    deformer: Deformer,
    queries: np.ndarray,
    targets: np.ndarray,
    condition: Condition,
    query_modality: Modality,
    grad_scores: np.ndarray,
) -> list[np.ndarray]:
    """Parameter gradient of ``sum(grad_scores * pair_scores(...))``.

    Only pairs with a nonzero entry in `grad_scores` are re-evaluated.
    """
    role = _role(condition, query_modality)
    zero = [np.zeros_like(a) for a in deformer.arrays()]
    qi, tj = np.nonzero(grad_scores)
    if len(qi) == 0:
        return zero
    w = grad_scores[qi, tj][:, None]
    acc = None
    if role == "none":
        uq, q_inv = np.unique(qi, return_inverse=True)
        ut, t_inv = np.unique(tj, return_inverse=True)
        dq = deform(deformer, queries[uq], None)
        dt = deform(deformer, targets[ut], None)
        ga, gb = _cos_grads(dq[q_inv], dt[t_inv])
        up_q = np.zeros_like(dq)
        up_t = np.zeros_like(dt)
        np.add.at(up_q, q_inv, w * ga)
        np.add.at(up_t, t_inv, w * gb)
        acc = _add(acc, deform_backward(deformer, queries[uq], None, up_q).params)
        acc = _add(acc, deform_backward(deformer, targets[ut], None, up_t).params)
        return acc
    # `own` vectors are deformed under themselves; `other` vectors under the paired `own`.
    if role == "target":
        own_idx, other_idx, own_src, other_src = tj, qi, targets, queries
    else:
        own_idx, other_idx, own_src, other_src = qi, tj, queries, targets
    u_own, own_inv = np.unique(own_idx, return_inverse=True)
    d_own = deform(deformer, own_src[u_own], own_src[u_own])
    cond = own_src[own_idx]
    d_other = deform(deformer, other_src[other_idx], cond)
    if role == "target":
        g_other, g_own = _cos_grads(d_other, d_own[own_inv])
    else:
        g_own, g_other = _cos_grads(d_own[own_inv], d_other)
    up_own = np.zeros_like(d_own)
    np.add.at(up_own, own_inv, w * g_own)
    acc = _add(acc, deform_backward(deformer, own_src[u_own], own_src[u_own], up_own).params)
    acc = _add(acc, deform_backward(deformer, other_src[other_idx], cond, w * g_other).params)
    return acc


def _directions(batch: GroupedEmbeddings):
    """(queries, targets, query modality, positive mask) for both retrieval directions."""
    n_groups = batch.n_groups
    caption_mask = np.arange(n_groups)[:, None] == batch.caption_group[None, :]
    return [
        # caption retrieval: image queries, caption targets
        (batch.images, batch.captions, Modality.IMAGE, caption_mask),
        # image retrieval: caption queries, image targets
        (batch.captions, batch.images, Modality.CAPTION, caption_mask.T),
    ]


def bidirectional_batch_loss(
    deformer: Deformer | None,
    batch: GroupedEmbeddings,
    margin: float,
    condition: Condition = Condition.TARGET,
    with_grad: bool = False,
):
    """Sum of the caption-retrieval and image-retrieval hinge losses on one batch.

    Returns the loss, or ``(loss, parameter gradients)`` when `with_grad` is set.
    """
    if batch.n_groups < 2:
        raise UsageError("a batch needs at least two groups so that negatives exist")
    total = 0.0
    grads = None
    for queries, targets, modality, mask in _directions(batch):
        scores = pair_scores(deformer, queries, targets, condition, modality)
        loss, routing = hinge_hardest_loss(SimilarityMatrix(scores, mask), margin)
        total += loss
        if with_grad and deformer is not None:
            g = pair_scores_vjp(deformer, queries, targets, condition, modality, routing.grad_scores())
            grads = _add(grads, g)
    if not with_grad:
        return total
    if grads is None:
        grads = [np.zeros_like(a) for a in deformer.arrays()] if deformer is not None else []
    return total, grads
