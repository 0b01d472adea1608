"""Adam, the step learning-rate schedule, and the training loop over frozen embeddings."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from todnet.core_types import Condition, DeformerKind, EmbeddingDataset
from todnet.data import batch_sampler
from todnet.errors import UsageError
from todnet.flow import Deformer, FlowGradients, init_flow, init_mlp_deformer
from todnet.loss import bidirectional_batch_loss


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    batch_size: int = 128
    epochs: int = 30
    lr: float = 2e-5
    lr_decay_epoch: int = 15
    lr_decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    condition: Condition = Condition.TARGET
    deformer: DeformerKind = DeformerKind.REAL_NVP
    n_layers: int = 3
    n_hidden_layers: int = 2
    hidden_units: int | None = None  # None means 2d
    mlp_hidden_layers: int = 4
    condition_normalized: bool = True
    val_folds: int = 5

    def validate(self) -> None:
        if self.margin < 0:
            raise UsageError("margin must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise UsageError("Adam betas must lie in [0, 1)")
        if self.eps <= 0 or self.lr <= 0:
            raise UsageError("lr and eps must be > 0")
        if self.batch_size < 2:
            raise UsageError("batch_size must be >= 2 groups")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0


def init_adam(params) -> AdamState:
    arrays = params.arrays()
    return AdamState(tuple(np.zeros_like(a) for a in arrays), tuple(np.zeros_like(a) for a in arrays), 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new params, new state).

    `params` is anything with ``arrays()``/``with_arrays()``; `grads` is a
    FlowGradients or a sequence of arrays in the same order.
    """
    g_list: Sequence[np.ndarray] = grads.params if isinstance(grads, FlowGradients) else grads
    p_list = params.arrays()
    if len(g_list) != len(p_list) or len(state.m) != len(p_list):
        raise UsageError("parameter, gradient and optimizer state counts differ")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_list, g_list, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise UsageError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_p), AdamState(tuple(new_m), tuple(new_v), t)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise UsageError("epoch must be >= 0")
    if epoch < config.lr_decay_epoch:
        return config.lr
    return config.lr * config.lr_decay_factor


def init_deformer(d: int, config: TrainConfig) -> Deformer:
    if config.deformer == DeformerKind.MLP:
        return init_mlp_deformer(
            d, config.mlp_hidden_layers, config.hidden_units, config.seed, config.condition_normalized
        )
    return init_flow(
        d, config.n_layers, config.n_hidden_layers, config.hidden_units, config.seed, config.condition_normalized
    )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_mr: float
    lr: float
    seconds: float

    def to_line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_mr:.6f}\t{self.lr:.6g}\t{self.seconds:.3f}"


LOG_HEADER = "epoch\ttrain_loss\tval_mR\tlr\tseconds"


@dataclass
class TrainResult:
    final: Deformer
    best: Deformer
    best_mr: float
    best_epoch: int
    history: list[EpochRecord] = field(default_factory=list)


def train(
    train_set: EmbeddingDataset,
    val_set: EmbeddingDataset | None,
    config: TrainConfig,
    eval_callback: Callable[[Deformer], float] | None = None,
    log: Callable[[str], None] | None = None,
    init: Deformer | None = None,
) -> TrainResult:
    """Train a deformer on frozen embeddings and keep the best-validation snapshot.

    `eval_callback(deformer)` returns the validation mR; by default it is the
    fold-averaged mR on `val_set`. Deterministic for a fixed config.
    """
    config.validate()
    if len(train_set) == 0:
        raise UsageError("training split is empty")
    if eval_callback is None:
        if val_set is None or len(val_set) == 0:
            raise UsageError("validation split is empty")
        from todnet.evaluation import evaluate_split

        def eval_callback(deformer):
            return evaluate_split(val_set, deformer, config.condition, config.val_folds).mr

    view = train_set.grouped
    if view.n_groups < 2:
        raise UsageError("training split needs at least two groups")
    deformer = init if init is not None else init_deformer(train_set.dimension, config)
    if deformer.dimension != train_set.dimension:
        raise UsageError(f"deformer dimension {deformer.dimension} != data dimension {train_set.dimension}")
    state = init_adam(deformer)
    best, best_mr, best_epoch = deformer, -np.inf, -1
    history = []
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_schedule(epoch, config)
        losses = []
        for groups in batch_sampler(view, config.batch_size, config.seed, epoch):
            loss, grads = bidirectional_batch_loss(
                deformer, view.subset(groups), config.margin, config.condition, with_grad=True
            )
            losses.append(loss)
            deformer, state = adam_step(deformer, grads, state, lr, config.beta1, config.beta2, config.eps)
        mr = float(eval_callback(deformer))
        rec = EpochRecord(epoch, float(np.mean(losses)), mr, lr, time.perf_counter() - start)
        history.append(rec)
        if log is not None:
            log(rec.to_line())
        if mr > best_mr:
            best, best_mr, best_epoch = deformer, mr, epoch
    return TrainResult(deformer, best, best_mr, best_epoch, history)
