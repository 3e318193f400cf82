"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s`` (or ``python tests/test_acceptance.py``).
"""
import json
import sys
import time
from collections import Counter
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

import flare.model as model_mod
from flare import gradcheck as gc
from flare.benchmark import BenchmarkProtocol, run as run_benchmark
from flare.cli import cmd_eval, cmd_train
from flare.config import RunConfig
from flare.dataio import NO_LABEL, apply_normalizer, fit_normalizer
from flare.metrics import ReportBuilder, row_normalize
from flare.model import ModelConfig, forward, init_params
from flare.numeric import AdamConfig
from flare.sampling import SplitSpec, enumerate_cohort, enumerate_subtrajectories, expected_count, split_patients
from flare.synthcohort import CohortSpec, generate_cohort
from flare.training import TrainConfig, accuracy, build_tensors, dataset_loss, train

from test_sampling import brute_force, make_traj, as_tuples


@pytest.fixture
def report(capsys):
    def emit(n, name, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return emit


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_correctness(report):
    t0 = time.perf_counter()
    results = gc.run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    labels = [r.label for r in results]
    worst = max(r.max_error for r in results)
    ok = all(r.ok for r in results) and elapsed < 60.0
    report(1, "gradcheck", ok, f"{len(results)} cases, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")
    # coverage: both alphas, with and without imputation, all three (T, tau), and the baseline
    for T, tau in ((2, 1), (3, 2), (4, 1)):
        for alpha in ("0", "1"):
            assert f"flare T={T} tau={tau} alpha={alpha}" in labels
            assert f"flare T={T} tau={tau} alpha={alpha} imputed" in labels
        assert f"concat T={T} tau={tau}" in labels
    failing = {r.label: r.failures for r in results if not r.ok}
    assert not failing, failing
    assert elapsed < 60.0


# ---------------------------------------------------------------- 2

def test_criterion_2_augmentation_oracle(report):
    for M in range(2, 9):
        labels = [int(x) for x in np.random.default_rng(M).integers(0, 3, M)]
        got = enumerate_subtrajectories(make_traj(labels))
        assert as_tuples(got) == brute_force(labels, [True] * M, list(range(M))), M
        assert len(got) == expected_count(M)
    rng = np.random.default_rng(7)
    for _ in range(200):
        M = int(rng.integers(2, 10))
        visits = np.sort(rng.choice(12, size=M, replace=False))
        observed = rng.random(M) < 0.7
        labels = np.where(rng.random(M) < 0.85, rng.integers(0, 3, M), NO_LABEL)
        got = enumerate_subtrajectories(make_traj(labels, observed, visits))
        assert as_tuples(got) == brute_force(list(labels), list(observed), list(visits))
    worked = enumerate_subtrajectories(make_traj([0, 1, 1, 2]), (2, 3))
    assert [(s.window_start, s.target_visit) for s in worked] == [(0, 2), (1, 3)]
    train_ids, test_ids = split_patients({f"p{i}": None for i in range(1652)}, SplitSpec(0.8, 0))
    assert (len(train_ids), len(test_ids)) == (1321, 331)
    report(2, "augmentation oracle", True, "M=2..8 and 200 random masks match brute force; worked example 2 windows; 1321/331")


# ---------------------------------------------------------------- 3

def test_criterion_3_metrics_oracle(report):
    fx = json.loads((Path(__file__).parent / "fixtures" / "metrics_10.json").read_text())
    b = ReportBuilder()
    for (y, p), bucket in zip(fx["pairs"], fx["buckets"]):
        b.accumulate(y, p, tuple(bucket))
    rep = b.finalize()
    f1 = float(Fraction(fx["expected"]["macro_f1"]))
    assert rep.overall["accuracy"] == 0.8
    assert abs(rep.overall["macro_f1"] - f1) <= 1e-12
    rows = row_normalize([[65, 19, 16], [30, 40, 30], [14, 8, 78]])
    assert rows.tolist() == [[0.65, 0.19, 0.16], [0.30, 0.40, 0.30], [0.14, 0.08, 0.78]]
    report(3, "metrics oracle", True, f"accuracy 0.8, macro-F1 {rep.overall['macro_f1']:.12f} = 50/63; row_normalize exact")


# ---------------------------------------------------------------- 4

def test_criterion_4_overfit_sanity(report):
    t0 = time.perf_counter()
    cfg = ModelConfig()
    cohort = generate_cohort(CohortSpec(n_patients=32, seed=0))
    ids = sorted(cohort)
    norm = fit_normalizer(cohort, ids)
    cohort = {k: apply_normalizer(v, norm) for k, v in cohort.items()}
    tensors = build_tensors(cohort, enumerate_cohort(cohort, ids), cfg)
    params = init_params(cfg, "flare", np.random.default_rng(0))
    start = dataset_loss(params, tensors)["total_loss"]
    train(params, tensors, TrainConfig(epochs=300, batch_size=16, seed=0), AdamConfig())
    end = dataset_loss(params, tensors)["total_loss"]
    acc = accuracy(params, tensors)
    elapsed = time.perf_counter() - t0
    reduction = 1.0 - end / start
    ok = acc >= 0.95 and reduction >= 0.90 and elapsed < 300
    report(4, "overfit sanity", ok,
           f"{len(tensors)} windows, train acc {acc:.3f} (>= 0.95), loss {start:.1f} -> {end:.3f} "
           f"({100 * reduction:.2f}% >= 90%), {elapsed:.0f}s (< 300s)")
    assert acc >= 0.95
    assert reduction >= 0.90
    assert elapsed < 300


# ---------------------------------------------------------------- 5

@pytest.mark.slow
def test_criterion_5_directional_benchmark(report, capsys):
    t0 = time.perf_counter()
    proto = BenchmarkProtocol()
    runs = []
    for seed in (0, 1, 2):
        for scheme in ("uniform_random", "per_length"):
            runs.extend(run_benchmark(seed, scheme, proto))
    elapsed = time.perf_counter() - t0
    by = {(r.seed, r.scheme, r.kind): r for r in runs}
    lines, on_par = [], True
    for seed in (0, 1, 2):
        for scheme in ("uniform_random", "per_length"):
            f, c = by[(seed, scheme, "flare")], by[(seed, scheme, "concat")]
            ok = f.test_f1 >= c.test_f1 - 0.02
            on_par &= ok
            lines.append(f"seed {seed} {scheme:<14s} flare {f.test_f1:.3f} concat {c.test_f1:.3f} "
                         f"(2,3): {f.bucket_f1.get((2, 3), float('nan')):.3f} vs {c.bucket_f1.get((2, 3), float('nan')):.3f}"
                         f"{'' if ok else '  <- below baseline - 0.02'}")
    bucket = {}
    for kind in ("flare", "concat"):
        bucket[kind] = float(np.mean([r.bucket_f1[(2, 3)] for r in runs if r.kind == kind]))
    wins_bucket = bucket["flare"] > bucket["concat"]
    ok = on_par and wins_bucket and elapsed < 1200
    with capsys.disabled():
        print()
        for line in lines:
            print("    " + line)
    report(5, "directional benchmark", ok,
           f"on-par in every run: {on_par}; (2,3) mean F1 flare {bucket['flare']:.3f} vs concat {bucket['concat']:.3f}; "
           f"{elapsed:.0f}s (< 1200s)")
    assert on_par, "FLARe overall macro-F1 fell more than 0.02 below the baseline in at least one run"
    assert wins_bucket, "FLARe does not beat the baseline on the (2, 3) bucket averaged over seeds"
    assert elapsed < 1200


# ---------------------------------------------------------------- 6

def test_criterion_6_determinism(tmp_path, report):
    doc = {
        "data": {"synth": {"n_patients": 40, "seed": 5}},
        "training": {"epochs": 3, "batch_size": 16, "seed": 9},
    }
    cfg = RunConfig.from_dict(doc)
    for run in ("a", "b"):
        cmd_train(cfg, tmp_path / run, ("flare", "concat"), log=lambda *_: None)
    same_ckpt = all(
        (tmp_path / "a" / kind / name).read_bytes() == (tmp_path / "b" / kind / name).read_bytes()
        for kind in ("flare", "concat") for name in ("final.ckpt", "best.ckpt")
    )
    reports = [cmd_eval(cfg, tmp_path / run / "flare" / "final.ckpt", tmp_path / f"ev_{run}") for run in ("a", "b")]
    same_report = reports[0] == reports[1]
    report(6, "determinism", same_ckpt and same_report,
           f"checkpoints bitwise identical: {same_ckpt}; eval reports identical: {same_report}")
    assert same_ckpt and same_report


# ---------------------------------------------------------------- 7

def test_criterion_7_bucket_grid(tmp_path, report):
    cfg = RunConfig.from_dict({"data": {"synth": {"n_patients": 80, "seed": 2}}, "training": {"epochs": 1, "seed": 0}})
    cmd_train(cfg, tmp_path / "run", ("flare",), log=lambda *_: None)
    rep = cmd_eval(cfg, tmp_path / "run" / "flare" / "final.ckpt", tmp_path / "ev")
    buckets = sorted(tuple(int(x) for x in k.split(",")) for k in rep["per_bucket"])
    grid = (tmp_path / "ev" / "bucket_f1.csv").read_text().splitlines()
    cells = [[c != "" for c in line.split(",")[1:]] for line in grid[1:]]
    expected = [(2, 1), (2, 2), (2, 3), (3, 1), (3, 2), (4, 1)]
    ok = buckets == expected and cells == [[True, True, True], [True, True, False], [True, False, False]]
    report(7, "bucket grid", ok, f"buckets {buckets}; populated pattern {cells}")
    assert buckets == expected
    assert cells == [[True, True, True], [True, True, False], [True, False, False]]


# ---------------------------------------------------------------- 8

def test_criterion_8_rollout_law(monkeypatch, report):
    rho_rows = Counter()
    rnn_rows = Counter()
    orig_mlp, orig_rnn = model_mod.mlp_forward, model_mod._rnn_step

    def counting_mlp(x, params, prefix):
        if prefix == "rho":
            rho_rows["total"] += np.atleast_2d(x).shape[0]
        return orig_mlp(x, params, prefix)

    def counting_rnn(f, h, params):
        rnn_rows["total"] += np.atleast_2d(f).shape[0]
        return orig_rnn(f, h, params)

    monkeypatch.setattr(model_mod, "mlp_forward", counting_mlp)
    monkeypatch.setattr(model_mod, "_rnn_step", counting_rnn)

    rng = np.random.default_rng(8)
    cfg = gc.tiny_config(max_T=6, max_sum_T_tau=9)
    params = {k: init_params(cfg, k, 0) for k in ("flare", "concat")}
    for case in range(1000):
        kind = "concat" if case % 5 == 4 else "flare"
        teacher = bool(rng.integers(2)) and kind == "flare"
        T = int(rng.integers(1, 7))
        B = int(rng.integers(1, 5))
        taus = rng.integers(1, 6, size=B)
        missing = []
        if kind == "flare":
            missing = [(b, t) for b in range(B) for t in range(1, T) if rng.random() < 0.3]
        batch = gc.random_batch(cfg, T, taus, rng, missing)
        rho_rows.clear()
        rnn_rows.clear()
        tr = forward(batch, params[kind], teacher=teacher)
        n_imputed = (~batch.observed).sum(axis=1)
        if kind == "flare":
            assert np.array_equal(tr.n_rnn_steps, T + taus)
            assert np.array_equal(tr.n_rho_rollout + tr.n_rho_imputed, taus + n_imputed)
            extra = (batch.observed[:, 1:].sum(axis=1)) if teacher else np.zeros(B, dtype=int)
            assert np.array_equal(tr.n_rho_teacher, extra)
            assert rho_rows["total"] == int((taus + n_imputed + extra).sum())
            assert rnn_rows["total"] == int((T + taus).sum())
            assert len(tr.h) == T and len(tr.h_hat) == int(taus.max())
            assert all(tr.provenance(b).count("rolled_out") == taus[b] for b in range(B))
        else:
            assert np.array_equal(tr.n_rnn_steps, np.full(B, T))
            assert rho_rows["total"] == 0
            assert rnn_rows["total"] == T * B
    report(8, "rollout-trace law", True, "1000 randomized cases: updates = T + tau, rho = tau + #imputed (+ teacher)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
