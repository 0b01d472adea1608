"""Acceptance suite: one PASS/FAIL line per criterion, at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``. The synthetic-training
criteria take a few minutes on one CPU core; their runs are shared through a
module fixture.
"""

import io
import struct
import time

import numpy as np
import pytest

import oracles
from conftest import make_dataset
from todnet.checkpoint import checkpoint_bytes, save_checkpoint
from todnet.cli import main
from todnet.core_types import Condition, Split
from todnet.data import SyntheticConfig, embeddings_bytes, generate_synthetic
from todnet.evaluation import KS, evaluate_split, format_one_decimal, mean_recall
from todnet.flow import deformed_similarity, flow_forward, init_flow
from todnet.loss import SimilarityMatrix, hinge_hardest_loss
from todnet.training import TrainConfig, train
from todnet.verify import fd_gradient_check, random_pairs, roundtrip_errors

SEEDS = (0, 1, 2)
# Reference training setup for the synthetic runs. The library defaults keep
# the published recipe (lr 2e-5, batch 128), which barely moves a deformer on a
# 500-group training set within 30 epochs.
REFERENCE = TrainConfig(batch_size=16, lr=1e-3)


@pytest.fixture
def emit(capsys):
    def _emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        return ok

    return _emit


@pytest.fixture(scope="module")
def synthetic_runs():
    """Per seed: baseline, target-conditioned and unconditioned test mR."""
    runs = {}
    start = time.perf_counter()
    for seed in SEEDS:
        sets = generate_synthetic(SyntheticConfig(seed=seed))
        base = evaluate_split(sets[Split.TEST])
        row = {"baseline": base, "sets": sets}
        for cond in (Condition.TARGET, Condition.NONE):
            cfg = TrainConfig(**{**REFERENCE.__dict__, "seed": seed, "condition": cond})
            result = train(sets[Split.TRAIN], sets[Split.VAL], cfg)
            row[cond] = (result, evaluate_split(sets[Split.TEST], result.best, cond))
        runs[seed] = row
    runs["seconds"] = time.perf_counter() - start
    return runs


@pytest.mark.slow
def test_bijectivity_on_trained_checkpoint(synthetic_runs, emit):
    flow = synthetic_runs[0][Condition.TARGET][0].best
    assert flow.dimension == 64
    v, c = random_pairs(64, 1000, 123)
    start = time.perf_counter()
    rt = roundtrip_errors(flow, v, c)
    seconds = time.perf_counter() - start
    moved = float(np.max(np.abs(flow_forward(flow, v, c) - v)))
    ok = rt.forward_inverse <= 1e-9 and rt.inverse_forward <= 1e-9 and seconds < 5 and moved > 0
    assert emit(
        "bijectivity",
        ok,
        f"fwd-inv {rt.forward_inverse:.2e}, inv-fwd {rt.inverse_forward:.2e} (tol 1e-9), "
        f"{seconds:.2f}s (< 5s), trained flow moves inputs by up to {moved:.3f}",
    )


def test_identity_at_initialization(emit):
    flow = init_flow(64, seed=0)
    v, c = random_pairs(64, 1000, 7)
    err = float(np.max(np.abs(flow_forward(flow, v, c) - v)))
    assert emit("identity at init", err == 0.0, f"max |D_c(v) - v| = {err} over 1000 pairs (must be exactly 0)")


def test_gradient_correctness(emit):
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for d in (4, 8):
        for seed in range(3):
            flow = init_flow(d, 3, 2, 8, seed, output_scale=0.8)
            rng = np.random.default_rng(100 + seed)
            rep = fd_gradient_check(flow, rng.standard_normal(d), rng.standard_normal(d), rng.standard_normal(d))
            worst = max(worst, rep.max_rel_error)
            checked += rep.n_checked
    seconds = time.perf_counter() - start
    ok = worst <= 1e-4 and seconds < 60
    assert emit(
        "gradient correctness",
        ok,
        f"{checked} coordinates (every parameter, input and condition entry, d in {{4, 8}}), "
        f"worst relative error {worst:.2e} (tol 1e-4), {seconds:.1f}s (< 60s)",
    )


def test_loss_oracle_equivalence(emit):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        q, t = int(rng.integers(1, 7)), int(rng.integers(2, 7))
        scores = rng.uniform(-1, 1, (q, t))
        mask = np.zeros((q, t), dtype=bool)
        for i in range(q):
            mask[i, rng.choice(t, int(rng.integers(1, t)), replace=False)] = True
        margin = float(rng.uniform(0, 0.5))
        loss, _ = hinge_hardest_loss(SimilarityMatrix(scores, mask), margin)
        worst = max(worst, abs(loss - oracles.hinge_enumeration(scores.tolist(), mask.tolist(), margin)))
    assert emit("loss oracle equivalence", worst <= 1e-12, f"200 matrices up to 6x6, max deviation {worst:.1e} (tol 1e-12)")


def test_metric_oracle_equivalence(emit):
    rng = np.random.default_rng(77)
    worst = 0.0
    for k in range(50):
        ds = make_dataset(int(rng.integers(2, 11)), d=2 * int(rng.integers(1, 4)), captions=int(rng.integers(1, 5)), seed=k)
        folds = 2 if ds.grouped.n_groups % 2 == 0 else 1
        flow = init_flow(ds.dimension, 2, 2, 6, k, output_scale=0.5) if k % 2 else None
        got = evaluate_split(ds, flow, Condition.TARGET, folds)
        size = ds.grouped.n_groups // folds
        fold_truth = []
        for f in range(folds):
            view = ds.grouped.subset(range(f * size, (f + 1) * size))

            def score(q, t, _):
                return oracles.cosine(q, t) if flow is None else deformed_similarity(flow, q, t, t)

            fold_truth.append(oracles.split_metrics(
                view.images.tolist(), view.image_ids.tolist(), view.captions.tolist(),
                view.caption_ids.tolist(), view.caption_group.tolist(), score,
            ))
        for kk in KS:
            worst = max(worst, abs(got.r_at[kk] - sum(t[0][kk] for t in fold_truth) / folds))
            worst = max(worst, abs(got.ri_at[kk] - sum(t[1][kk] for t in fold_truth) / folds))
        worst = max(worst, abs(got.mr - sum(t[2] for t in fold_truth) / folds))
        worst = max(worst, abs(got.med_r - sum(t[3] for t in fold_truth) / folds))
    table = mean_recall({1: 65.9, 5: 90.7, 10: 96.2}, {1: 52.9, 5: 84.6, 10: 92.4})
    ok = worst <= 1e-12 and abs(table - 80.45) <= 1e-9 and format_one_decimal(table) == "80.5"
    assert emit(
        "metric oracle equivalence",
        ok,
        f"50 toy splits, max deviation {worst:.1e}; table row mR {table:.10g} -> {format_one_decimal(table)} (expect 80.5)",
    )


@pytest.mark.slow
def test_synthetic_effectiveness(synthetic_runs, emit):
    gains, r1, lines, loss_down = [], [], [], []
    for seed in SEEDS:
        row = synthetic_runs[seed]
        base = row["baseline"]
        result, target = row[Condition.TARGET]
        gains.append(target.mr - base.mr)
        r1.append(base.r_at[1])
        loss_down.append(result.history[-1].train_loss < result.history[0].train_loss)
        lines.append(f"seed {seed}: {100 * base.mr:.1f} -> {100 * target.mr:.1f}")
    seconds = synthetic_runs["seconds"]
    ok = (
        all(g > 0 for g in gains)
        and np.mean(gains) > 0
        and all(0.30 <= r <= 0.70 for r in r1)
        and all(loss_down)
        and seconds < 600
    )
    assert emit(
        "synthetic effectiveness",
        ok,
        f"test mR {'; '.join(lines)}; mean gain {100 * np.mean(gains):+.2f} points; baseline R@1 "
        f"{', '.join(f'{100 * r:.0f}%' for r in r1)} (need 30-70%); training loss fell in {sum(loss_down)}/3; "
        f"{seconds:.0f}s for all training runs (< 600s)",
    )


@pytest.mark.slow
def test_ablation_ordering(synthetic_runs, emit):
    wins, parts = 0, []
    for seed in SEEDS:
        target = synthetic_runs[seed][Condition.TARGET][1].mr
        none = synthetic_runs[seed][Condition.NONE][1].mr
        wins += target >= none
        parts.append(f"seed {seed}: target {100 * target:.2f} vs none {100 * none:.2f}")
    assert emit("ablation ordering", wins >= 2, f"{'; '.join(parts)}; target >= none in {wins}/3 (need >= 2)")


def _cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    return main([str(a) for a in argv], out=out, err=err), err.getvalue()


def test_determinism(tmp_path, emit):
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        _cli("gen-data", "--out", d, "--seed", 5)
        _cli("train", "--train", d / "train.tde", "--val", d / "val.tde", "--out", d / "m.todf",
             "--epochs", 2, "--batch-size", 16, "--lr", 1e-3, "--seed", 5)
        digests.append({name: (d / name).read_bytes() for name in ("train.tde", "val.tde", "test.tde", "m.todf")})
    same = [name for name in digests[0] if digests[0][name] == digests[1][name]]
    ok = len(same) == 4
    assert emit("determinism", ok, f"byte-identical across two runs: {', '.join(same)} (need all 4)")


def _tde_mutants():
    good = embeddings_bytes(make_dataset(3, d=4, captions=2, seed=0))
    rec = 17 + 16
    image_byte = 18 + rec + 8  # modality of the first caption
    orphan = bytearray(good)
    orphan[18 + 9:18 + 17] = struct.pack("<Q", 99)  # image moves to a group without captions
    return [
        ("BadMagicError", b"XXXX" + good[4:]),
        ("BadMagicError", b"TODF" + good[4:]),
        ("TruncatedFileError", good[:-1]),
        ("TruncatedFileError", good[:12]),
        ("TruncatedFileError", good[:4] + good[4:10] + struct.pack("<Q", 50) + good[18:]),
        ("OddDimensionError", good[:6] + struct.pack("<I", 3) + good[10:]),
        ("OddDimensionError", good[:6] + struct.pack("<I", 0) + good[10:]),
        ("GroupIntegrityError", bytes(good[:image_byte]) + b"\0" + good[image_byte + 1:]),
        ("GroupIntegrityError", bytes(orphan)),
        ("GroupIntegrityError", good[:18 + rec] + good[18:18 + 8] + good[18 + rec + 8:]),
    ]


def _todf_mutants():
    good = checkpoint_bytes(init_flow(4, 3, 2, 8, 1, output_scale=0.3))
    return [
        ("BadMagicError", b"TDE1" + good[4:]),
        ("BadMagicError", b"\0\0\0\0" + good[4:]),
        ("TruncatedFileError", good[:-8]),
        ("TruncatedFileError", good[:3]),
        ("TruncatedFileError", good[:30]),
        ("OddDimensionError", good[:8] + struct.pack("<I", 5) + good[12:]),
        ("OddDimensionError", good[:8] + struct.pack("<I", 1) + good[12:]),
        ("UnsupportedVersionError", good[:4] + struct.pack("<H", 2) + good[6:]),
        ("LayerShapeError", good[:16] + b"\0" + good[17:]),
        ("TrailingDataError", good + b"\1"),
    ]


def test_format_robustness(tmp_path, emit):
    results = []
    for i, (expected, blob) in enumerate(_tde_mutants()):
        path = tmp_path / f"m{i}.tde"
        path.write_bytes(blob)
        code, err = _cli("eval", "--baseline", "--data", path, "--manifest", tmp_path / "manifest")
        results.append((expected, code, err))
    for i, (expected, blob) in enumerate(_todf_mutants()):
        path = tmp_path / f"m{i}.todf"
        path.write_bytes(blob)
        code, err = _cli("roundtrip-check", "--checkpoint", path, "--samples", 10, "--manifest", tmp_path / "manifest")
        results.append((expected, code, err))
    good = [r for r in results if r[1] != 0 and r[0] in r[2]]
    bad = [f"{e} -> exit {c}: {err.strip()}" for e, c, err in results if (e, c, err) not in good]
    assert emit(
        "format robustness",
        len(results) == 20 and not bad,
        f"{len(good)}/{len(results)} mutated files gave the named parse error with a nonzero exit"
        + (f"; unexpected: {bad}" if bad else ""),
    )
