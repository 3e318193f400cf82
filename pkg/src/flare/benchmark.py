"""FLARe vs. RNN-Concat on a synthetic cohort under one fixed, shared protocol.

Protocol (identical for both models, chosen independently of test results):
patients are split train/test, a further fraction of the training patients is
held out for validation, each model trains for up to ``max_epochs`` and the
parameters from the epoch with the highest validation macro-F1 are scored on
the test windows.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dataio import apply_normalizer, fit_normalizer
from .model import ModelConfig, init_params
from .sampling import SplitSpec, enumerate_cohort, split_patients
from .synthcohort import CohortSpec, generate_cohort
from .training import TrainConfig, build_tensors, evaluate, train, usable_samples


@dataclass(frozen=True)
class BenchmarkProtocol:
    n_patients: int = 400
    train_fraction: float = 0.8
    val_fraction: float = 0.2
    max_epochs: int = 20
    batch_size: int = 32
    model: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class BenchmarkRun:
    seed: int
    scheme: str
    kind: str
    best_epoch: int
    val_f1: float
    test_f1: float
    bucket_f1: dict
    seconds: float


def _fit_select(kind, config, ttr, tval, tte, scheme, seed, proto):
    params = init_params(config, kind, np.random.default_rng(seed))
    best = (-1.0, -1, None)
    for epoch in range(proto.max_epochs):
        # one epoch per call, with a distinct loader seed per epoch
        train(params, ttr, TrainConfig(epochs=1, batch_size=proto.batch_size, seed=seed * 1000 + epoch, loader_scheme=scheme))
        f1 = evaluate(params, tval).finalize().overall["macro_f1"]
        if f1 > best[0]:
            best = (f1, epoch, params.copy())
    val_f1, best_epoch, chosen = best
    return chosen, best_epoch, val_f1


def run(seed: int, scheme: str, proto: BenchmarkProtocol = BenchmarkProtocol(), kinds=("flare", "concat")) -> list[BenchmarkRun]:
    cfg = proto.model
    cohort = generate_cohort(CohortSpec(n_patients=proto.n_patients, dims=cfg.input_dims, seed=seed))
    train_ids, test_ids = split_patients(cohort, SplitSpec(proto.train_fraction, seed))
    fit_ids, val_ids = split_patients({k: None for k in train_ids}, SplitSpec(1.0 - proto.val_fraction, seed + 1))
    norm = fit_normalizer(cohort, fit_ids)
    cohort = {k: apply_normalizer(v, norm) for k, v in cohort.items()}
    lim = (cfg.max_T, cfg.max_sum_T_tau)
    out = []
    for kind in kinds:
        t0 = time.perf_counter()
        tensors = [
            build_tensors(cohort, usable_samples(enumerate_cohort(cohort, ids, lim), kind), cfg)
            for ids in (fit_ids, val_ids, test_ids)
        ]
        params, epoch, val_f1 = _fit_select(kind, cfg, *tensors, scheme, seed, proto)
        rep = evaluate(params, tensors[2]).finalize()
        out.append(BenchmarkRun(
            seed, scheme, kind, epoch, val_f1, rep.overall["macro_f1"],
            {b: v["macro_f1"] for b, v in rep.per_bucket.items()}, time.perf_counter() - t0,
        ))
    return out
