"""
Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""
import subprocess
import sys
import time

import numpy as np
import pytest

from groupmixer import data, tensor as T, train
from groupmixer.autodiff import Variable
from groupmixer.cli import main
from groupmixer.gradsuite import TOLERANCE, run_suite
from groupmixer.metrics import ConfusionMatrix, compute_metrics
from groupmixer.model import ModelConfig, build, count_parameters, load_checkpoint, save_checkpoint
from groupmixer.train import TrainHyper, train_model
from oracles import naive_conv2d

TABLE_COUNTS = {"base": 102018, "slim-g2": 77442, "slim-g4": 65154}


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        return ok
    return emit


def test_01_parameter_counts(report):
    got, slowest = {}, 0.0
    for variant in TABLE_COUNTS:
        start = time.perf_counter()
        out = subprocess.run([sys.executable, "-m", "groupmixer", "count-params", "--variant", variant],
                             capture_output=True, text=True, check=True)
        slowest = max(slowest, time.perf_counter() - start)
        got[variant] = int(out.stdout)
    ok = got == TABLE_COUNTS and slowest < 1.0
    assert report(1, ok, f"counts {got}, slowest {slowest:.2f}s")


def test_02_savings_identity(report):
    counts = {v: count_parameters(build(ModelConfig(variant=v), np.random.default_rng(0)))
              for v in ("base", "slim_g2", "slim_g4")}
    saved = {}
    for v in ("slim_g2", "slim_g4"):
        cfg = ModelConfig(variant=v)
        identity = cfg.depth * cfg.embed_dim**2 * (cfg.groups - 1) // cfg.groups
        assert cfg.depth * cfg.embed_dim**2 * (cfg.groups - 1) % cfg.groups == 0
        saved[v] = (counts["base"] - counts[v], identity)
    ok = saved == {"slim_g2": (24576, 24576), "slim_g4": (36864, 36864)}
    assert report(2, ok, f"(measured, d*h^2*(1-1/G)) = {saved}")


def test_03_gradient_suite(report):
    start = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - start
    names = {r.name for r in results}
    required = {"patch_embed", "depthwise_block_residual", "pointwise_g1", "pointwise_g2_shuffle",
                "pointwise_g4_shuffle", "batchnorm_train", "global_avg_pool", "linear_head", "focal_loss"}
    worst = max(results, key=lambda r: r.result.max_relative_error)
    ok = required <= names and all(r.passed for r in results) and elapsed < 120
    assert report(3, ok, f"{len(results)} cases, worst {worst.name} {worst.result.max_relative_error:.2e} "
                         f"(tol {TOLERANCE:g}), {elapsed:.1f}s")


def test_04_conv_against_naive(report):
    rng = np.random.default_rng(2024)
    worst, shapes = 0.0, 0
    while shapes < 240:
        groups = int(rng.choice([1, 2, 3, 4]))
        cin = groups * int(rng.integers(1, 3))
        cout = groups * int(rng.integers(1, 3))
        if rng.random() < 0.25:  # depthwise
            groups, cout = cin, cin
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, k))
        h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
        n = int(rng.integers(1, 3))
        x = rng.standard_normal((n, cin, h, w))
        wt = rng.standard_normal((cout, cin // groups, k, k))
        b = rng.standard_normal(cout) if rng.random() < 0.5 else None
        got = T.conv2d(x, wt, b, stride=stride, padding=padding, groups=groups)
        want = naive_conv2d(x, wt, b, stride, padding, groups)
        assert got.shape == want.shape
        err = np.abs(got - want) / np.maximum(np.abs(want), 1.0)
        worst = max(worst, float(err.max()))
        shapes += 1
    ok = worst <= 1e-5
    assert report(4, ok, f"{shapes} random shapes, max relative error {worst:.2e}")


def test_05_shuffle_laws(report):
    checked = 0
    for c in range(1, 17):
        x = np.arange(c, dtype=np.float64).reshape(1, c, 1, 1) + np.zeros((2, c, 2, 3))
        for g in (d for d in range(1, c + 1) if c % d == 0):
            y = T.channel_shuffle(x, g)
            perm = y[0, :, 0, 0].astype(int)
            assert sorted(perm.tolist()) == list(range(c))
            # output i takes input (i mod g) * (C/g) + i div g
            assert perm.tolist() == [(i % g) * (c // g) + i // g for i in range(c)]
            np.testing.assert_array_equal(T.channel_shuffle(y, c // g), x)
            if g == 1:
                np.testing.assert_array_equal(y, x)
            checked += 1
    assert report(5, True, f"{checked} (C, g) pairs with C <= 16")


def test_06_overfit_smoke(report, tmp_path):
    start = time.perf_counter()
    assert main(["synth", "--out", str(tmp_path), "--n", "32", "--seed", "0"]) == 0
    samples = data.scan_dataset(tmp_path, "40X")
    ds = data.ImageDataset(samples, (56, 56))
    hyper = TrainHyper(batch_size=32, max_epochs=200, patience=200, seed=0, augment=False,
                       target_train_accuracy=0.95)
    _, history = train_model(ModelConfig(variant="base", input_size=(56, 56)), ds, ds, hyper)
    elapsed = time.perf_counter() - start
    losses = [e.train_loss for e in history[:5]]
    reached = next((e.epoch for e in history if e.train_acc >= 0.95), None)
    decreasing = len(losses) == 5 and all(b < a for a, b in zip(losses, losses[1:]))
    ok = reached is not None and reached <= 200 and decreasing and elapsed < 600
    assert report(6, ok, f"95% train accuracy at epoch {reached}, first losses "
                         f"{[round(v, 4) for v in losses]}, {elapsed:.0f}s")


def test_07_f1_consistency(report):
    # tp/(tp+fp) = 0.98910, tp/(tp+fn) = 0.97650
    cm = ConfusionMatrix(tp=97650, fn=2350, fp=1076, tn=50000)
    r = compute_metrics(cm)
    ok = abs(r.f1 - 0.9828) <= 1e-3 and abs(r.precision - 0.9891) < 5e-5 and abs(r.recall - 0.9765) < 5e-5
    assert report(7, ok, f"P={r.precision:.4f} R={r.recall:.4f} F1={r.f1:.4f}")


def test_08_leakage_guard(report, monkeypatch, synth_root):
    calls = {"train": 0, "eval": 0}
    in_eval = []
    real_augment, real_evaluate = data.augment, train.evaluate

    def counting_augment(*args, **kwargs):
        calls["eval" if in_eval else "train"] += 1
        return real_augment(*args, **kwargs)

    def flagged_evaluate(*args, **kwargs):
        in_eval.append(True)
        try:
            return real_evaluate(*args, **kwargs)
        finally:
            in_eval.pop()

    monkeypatch.setattr(data, "augment", counting_augment)
    monkeypatch.setattr(train, "evaluate", flagged_evaluate)

    samples = data.scan_dataset(synth_root, "40X")
    manifest = data.split(samples, seed=0)
    parts = {p: data.ImageDataset(manifest.select(samples, p), (14, 14)) for p in ("train", "val", "test")}
    cfg = ModelConfig(variant="slim_g2", input_size=(14, 14))
    model, _ = train_model(cfg, parts["train"], parts["val"], TrainHyper(max_epochs=3, batch_size=8))
    train.evaluate(model, parts["test"])
    keys = [set(manifest.train), set(manifest.val), set(manifest.test)]
    disjoint = not (keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])
    exhaustive = sum(map(len, keys)) == len(samples)
    ok = calls["eval"] == 0 and calls["train"] > 0 and disjoint and exhaustive
    assert report(8, ok, f"augment calls during training {calls['train']}, during evaluation {calls['eval']}; "
                         f"manifests disjoint={disjoint}")


def test_09_end_to_end_determinism(report, synth_root, tmp_path):
    argv = ["train", "--root", str(synth_root), "--variant", "base", "--input-size", "56",
            "--max-epochs", "4", "--seed", "7"]
    for name in ("a", "b"):
        assert main([*argv, "--run-dir", str(tmp_path / name)]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("metrics.json", "model.gmxr", "split.json", "training_log.csv")}
    assert report(9, all(same.values()), f"byte-identical artifacts {same}")


def test_10_checkpoint_round_trip(report, tmp_path):
    rng = np.random.default_rng(10)
    mismatches = 0
    for variant in ("base", "slim_g2", "slim_g4"):
        model = build(ModelConfig(variant=variant, input_size=(28, 28)), rng)
        model(Variable(rng.random((8, 3, 28, 28), dtype=np.float32)))  # non-trivial running stats
        model.eval()
        loaded = load_checkpoint(save_checkpoint(model, tmp_path / f"{variant}.gmxr"))
        for _ in range(100):
            x = rng.standard_normal((1, 3, 28, 28)).astype(np.float32)
            mismatches += loaded.predict_logits(x).tobytes() != model.predict_logits(x).tobytes()
    assert report(10, mismatches == 0, f"300 forwards across 3 variants, {mismatches} bitwise mismatches")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
