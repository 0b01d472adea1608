import math
from dataclasses import replace

import numpy as np
import pytest

import oracles
from conftest import make_dataset
from todnet.checkpoint import checkpoint_bytes
from todnet.core_types import Condition, DeformerKind, EmbeddingDataset, EmbeddingRecord, Modality, Split
from todnet.data import SyntheticConfig, generate_synthetic
from todnet.errors import UsageError
from todnet.flow import MlpParams, init_flow
from todnet.training import LOG_HEADER, AdamState, TrainConfig, adam_step, init_adam, lr_schedule, train


class Scalar:
    """A one-parameter model so the Adam recurrences can be checked by hand."""

    def __init__(self, x):
        self.x = np.array([float(x)])

    def arrays(self):
        return [self.x]

    def with_arrays(self, arrays):
        return Scalar(arrays[0][0])


@pytest.mark.parametrize("g", [0.3, -2.5, 1e-9])
def test_adam_first_step_matches_hand_iteration(g):
    p, state = adam_step(Scalar(1.0), [np.array([g])], init_adam(Scalar(1.0)), 0.01)
    assert state.t == 1
    assert abs(p.x[0] - oracles.adam_scalar(1.0, [g], 0.01, 0.9, 0.999, 1e-8)) <= 1e-12
    if abs(g) > 1e-3:
        assert p.x[0] == pytest.approx(1.0 - 0.01 * math.copysign(1, g), abs=1e-7)


def test_adam_many_steps_match_hand_iteration():
    grads = [0.5, -0.1, 0.3, 0.0, 2.0, -1.0]
    p, state = Scalar(0.2), init_adam(Scalar(0.2))
    for g in grads:
        p, state = adam_step(p, [np.array([g])], state, 1e-3, 0.8, 0.99, 1e-6)
    assert state.t == len(grads)
    assert abs(p.x[0] - oracles.adam_scalar(0.2, grads, 1e-3, 0.8, 0.99, 1e-6)) <= 1e-12


def test_adam_zero_gradient_and_symmetry():
    flow = init_flow(4, 3, 2, 8, 0, output_scale=0.5)
    state = init_adam(flow)
    same, state1 = adam_step(flow, [np.zeros_like(a) for a in flow.arrays()], state, 0.1)
    assert state1.t == 1
    assert all(np.array_equal(a, b) for a, b in zip(same.arrays(), flow.arrays()))

    twin = MlpParams((np.ones((2, 2)), np.ones((2, 2))), (np.zeros(2), np.zeros(2)))
    g = [np.full((2, 2), 0.3), np.zeros(2), np.full((2, 2), 0.3), np.zeros(2)]
    out, _ = adam_step(twin, g, init_adam(twin), 0.05)
    assert np.array_equal(out.weights[0], out.weights[1])
    again, _ = adam_step(twin, g, init_adam(twin), 0.05)
    assert all(np.array_equal(a, b) for a, b in zip(out.arrays(), again.arrays()))


def test_adam_shape_mismatch():
    with pytest.raises(UsageError):
        adam_step(Scalar(1.0), [np.zeros(2)], init_adam(Scalar(1.0)), 0.1)
    with pytest.raises(UsageError):
        adam_step(Scalar(1.0), [], AdamState((np.zeros(1),), (np.zeros(1),), 0), 0.1)


def test_lr_schedule_defaults():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 2e-5
    assert lr_schedule(14, cfg) == 2e-5
    assert lr_schedule(15, cfg) == pytest.approx(2e-6, rel=1e-15)
    assert lr_schedule(29, cfg) == pytest.approx(2e-6, rel=1e-15)
    with pytest.raises(UsageError):
        lr_schedule(-1, cfg)


def test_config_validation():
    for bad in (dict(margin=-0.1), dict(beta1=1.0), dict(eps=0.0), dict(batch_size=1), dict(lr=0.0)):
        with pytest.raises(UsageError):
            replace(TrainConfig(), **bad).validate()


def _separated_dataset(split):
    """Two well-separated groups: the loss is already zero at the identity."""
    recs = [
        EmbeddingRecord(0, Modality.IMAGE, 0, np.array([1.0, 0.0])),
        EmbeddingRecord(1, Modality.CAPTION, 0, np.array([1.0, 0.0])),
        EmbeddingRecord(2, Modality.IMAGE, 1, np.array([-1.0, 0.0])),
        EmbeddingRecord(3, Modality.CAPTION, 1, np.array([-1.0, 0.0])),
    ]
    return EmbeddingDataset(2, recs, split)


def test_zero_loss_leaves_parameters_unchanged():
    cfg = TrainConfig(epochs=1, batch_size=2, lr=0.1, val_folds=1, hidden_units=4)
    init = init_flow(2, 3, 2, 4, 0)
    result = train(_separated_dataset(Split.TRAIN), _separated_dataset(Split.VAL), cfg, init=init)
    assert result.history[0].train_loss == 0.0
    assert checkpoint_bytes(result.final) == checkpoint_bytes(init)


@pytest.fixture(scope="module")
def tiny_splits():
    cfg = SyntheticConfig(train_groups=40, val_groups=10, test_groups=10, d=8, n_aspects=2, captions_per_image=3, seed=4)
    return generate_synthetic(cfg)


def test_train_is_deterministic_and_logs(tiny_splits):
    cfg = TrainConfig(epochs=3, batch_size=8, lr=1e-2, lr_decay_epoch=2, val_folds=2, seed=9)
    lines = []
    a = train(tiny_splits[Split.TRAIN], tiny_splits[Split.VAL], cfg, log=lines.append)
    b = train(tiny_splits[Split.TRAIN], tiny_splits[Split.VAL], cfg)
    assert checkpoint_bytes(a.final) == checkpoint_bytes(b.final)
    assert checkpoint_bytes(a.best) == checkpoint_bytes(b.best)
    assert len(lines) == 3 and len(lines[0].split("\t")) == len(LOG_HEADER.split("\t"))
    assert [h.lr for h in a.history] == [1e-2, 1e-2, 1e-3]
    assert a.best_mr == max(h.val_mr for h in a.history)
    assert a.history[a.best_epoch].val_mr == a.best_mr


@pytest.mark.parametrize("condition", list(Condition))
def test_train_lowers_loss_on_tiny_set(tiny_splits, condition):
    cfg = TrainConfig(epochs=4, batch_size=8, lr=1e-2, val_folds=1, condition=condition)
    r = train(tiny_splits[Split.TRAIN], tiny_splits[Split.VAL], cfg)
    assert r.history[-1].train_loss < r.history[0].train_loss


def test_train_mlp_deformer(tiny_splits):
    cfg = TrainConfig(epochs=2, batch_size=8, lr=1e-3, val_folds=1, deformer=DeformerKind.MLP, mlp_hidden_layers=4)
    r = train(tiny_splits[Split.TRAIN], tiny_splits[Split.VAL], cfg)
    assert len(r.final.mlp.weights) == 5
    assert np.isfinite(r.best_mr)


def test_train_errors(tiny_splits):
    cfg = TrainConfig(epochs=1, batch_size=4, val_folds=1)
    with pytest.raises(UsageError):
        train(make_dataset(1, d=8), tiny_splits[Split.VAL], cfg)
    with pytest.raises(UsageError):
        train(tiny_splits[Split.TRAIN], None, cfg)
    with pytest.raises(UsageError):
        train(tiny_splits[Split.TRAIN], tiny_splits[Split.VAL], cfg, init=init_flow(4, seed=0))
