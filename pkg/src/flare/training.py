"""Sample tensors, the Adam training loop and batched evaluation."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataio import Trajectory
from .metrics import ReportBuilder
from .model import Batch, ModelConfig, ModelParams, compute_loss, forward, loss_and_grad, predict
from .numeric import AdamConfig, adam_step
from .sampling import LOADERS, Subtrajectory


@dataclass
class SampleTensors:
    """Window features of a sample list, stacked per window length T."""

    samples: list
    groups: dict  # T -> Batch holding every sample of that length
    position: np.ndarray  # sample index -> row inside its T group

    def batch(self, indices: Sequence[int]) -> Batch:
        indices = list(indices)
        T = self.samples[indices[0]].T
        g = self.groups[T]
        rows = self.position[indices]
        return Batch(
            g.volumetric[rows], g.demographic[rows], g.cognitive[rows],
            observed=g.observed[rows], tau=g.tau[rows], labels=g.labels[rows],
        )

    def __len__(self) -> int:
        return len(self.samples)


def build_tensors(cohort: Mapping[str, Trajectory], samples: Sequence[Subtrajectory], config: ModelConfig) -> SampleTensors:
    samples = list(samples)
    by_T: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_T.setdefault(s.T, []).append(i)
    position = np.zeros(len(samples), dtype=np.int64)
    groups = {}
    dims = config.input_dims
    for T, idx in sorted(by_T.items()):
        n = len(idx)
        arrays = [np.zeros((n, T, d)) for d in dims]
        observed = np.zeros((n, T), dtype=bool)
        tau = np.zeros(n, dtype=np.int64)
        labels = np.zeros(n, dtype=np.int64)
        for r, i in enumerate(idx):
            s = samples[i]
            position[i] = r
            tr = cohort[s.patient_id]
            rows = tr.row_of()
            for j in range(T):
                k = rows.get(s.window_start + j)
                if k is None or not tr.observed[k]:
                    continue
                observed[r, j] = True
                arrays[0][r, j] = tr.volumetric[k]
                arrays[1][r, j] = tr.demographic[k]
                arrays[2][r, j] = tr.cognitive[k]
            tau[r] = s.tau
            labels[r] = s.target_label
        if any(a.shape[2] != tr_dim for a, tr_dim in zip(arrays, dims)):
            raise ValueError("feature dims do not match the model config")
        groups[T] = Batch(*arrays, observed=observed, tau=tau, labels=labels)
    return SampleTensors(samples, groups, position)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    loader_scheme: str = "uniform_random"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.loader_scheme not in LOADERS:
            raise ValueError(f"loader_scheme must be one of {sorted(LOADERS)}, got {self.loader_scheme!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainResult:
    params: ModelParams
    best: ModelParams
    best_epoch: int
    log: list = field(default_factory=list)


def usable_samples(samples: Sequence[Subtrajectory], kind: str) -> list[Subtrajectory]:
    """The baseline cannot take windows with missing visits, so they are dropped for it."""
    if kind == "concat":
        return [s for s in samples if s.fully_observed]
    return list(samples)


def train(
    params: ModelParams,
    tensors: SampleTensors,
    cfg: TrainConfig,
    adam: AdamConfig = AdamConfig(),
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minibatch Adam on the summed batch loss. Logs one record per epoch.

    The best snapshot is the parameters at the end of the epoch with the
    lowest summed training loss.
    """
    loader = LOADERS[cfg.loader_scheme](tensors.samples, cfg.batch_size, cfg.seed, epochs=None)
    n_batches = _batches_per_epoch(tensors, cfg.batch_size)
    best, best_loss, best_epoch = params.copy(), np.inf, -1
    log = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total = cel = aux = 0.0
        for _ in range(n_batches):
            batch = tensors.batch(next(loader))
            params.zero_grads()
            terms = loss_and_grad(batch, params)
            params.step += 1
            adam_step(params, adam.lr, adam.beta1, adam.beta2, adam.eps, params.step)
            params.mark_updated()
            total += terms.total
            cel += terms.cel
            aux += terms.aux
        rec = {"epoch": epoch, "total_loss": total, "cel": cel, "aux": aux,
               "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3)}
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if total < best_loss:
            best, best_loss, best_epoch = params.copy(), total, epoch
    return TrainResult(params, best, best_epoch, log)


def _batches_per_epoch(tensors: SampleTensors, batch_size: int) -> int:
    return sum(-(-g.size // batch_size) for g in tensors.groups.values())


def dataset_loss(params: ModelParams, tensors: SampleTensors, chunk: int = 512) -> dict:
    """Summed loss over every sample, without touching gradients."""
    lw = params.config.loss
    out = {"total_loss": 0.0, "cel": 0.0, "aux": 0.0}
    for g in tensors.groups.values():
        for k in range(0, g.size, chunk):
            sl = slice(k, k + chunk)
            b = Batch(g.volumetric[sl], g.demographic[sl], g.cognitive[sl], g.observed[sl], g.tau[sl], g.labels[sl])
            terms = compute_loss(forward(b, params, teacher=lw.alpha > 0), b.labels, lw)
            out["total_loss"] += terms.total
            out["cel"] += terms.cel
            out["aux"] += terms.aux
    return out


def predict_all(params: ModelParams, tensors: SampleTensors, chunk: int = 512) -> np.ndarray:
    pred = np.zeros(len(tensors), dtype=np.int64)
    for T, g in tensors.groups.items():
        idx = np.array([i for i, s in enumerate(tensors.samples) if s.T == T])
        order = np.argsort(tensors.position[idx])
        idx = idx[order]
        for k in range(0, g.size, chunk):
            sl = slice(k, k + chunk)
            b = Batch(g.volumetric[sl], g.demographic[sl], g.cognitive[sl], g.observed[sl], g.tau[sl], g.labels[sl])
            pred[idx[sl]] = predict(b, params)
    return pred


def evaluate(params: ModelParams, tensors: SampleTensors) -> ReportBuilder:
    cfg = params.config
    builder = ReportBuilder(cfg.max_T, cfg.max_sum_T_tau)
    pred = predict_all(params, tensors)
    for s, p in zip(tensors.samples, pred):
        builder.accumulate(s.target_label, int(p), s.bucket)
    return builder


def accuracy(params: ModelParams, tensors: SampleTensors) -> float:
    pred = predict_all(params, tensors)
    truth = np.array([s.target_label for s in tensors.samples])
    return float((pred == truth).mean())
