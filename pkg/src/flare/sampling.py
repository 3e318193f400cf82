"""Subtrajectory augmentation, patient-level splitting and T-homogeneous batch loaders."""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .dataio import NO_LABEL, Trajectory


class SplitConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Subtrajectory:
    """A T-visit input window and the stage ``tau`` visits after its last position.

    ``window_start`` is a visit index; ``missing_mask[j]`` is True when visit
    ``window_start + j`` has no observed features.
    """

    patient_id: str
    window_start: int
    T: int
    tau: int
    target_label: int
    missing_mask: tuple

    @property
    def target_visit(self) -> int:
        return self.window_start + self.T - 1 + self.tau

    @property
    def bucket(self) -> tuple[int, int]:
        return (self.T, self.tau)

    @property
    def fully_observed(self) -> bool:
        return not any(self.missing_mask)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0


def enumerate_subtrajectories(traj: Trajectory, limits: tuple[int, int] = (4, 5)) -> list[Subtrajectory]:
    """Every valid (window, horizon) sample from one trajectory.

    Windows are contiguous in visit index. A window qualifies when its first
    visit is observed and the target visit has a label; visit indices absent
    from the record count as missing. Ordered by window_start, then T, then tau.
    """
    max_T, max_sum = limits
    if len(traj) == 0:
        return []
    rows = traj.row_of()
    first, last = int(traj.visits[0]), int(traj.visits[-1])

    def observed(v):
        i = rows.get(v)
        return i is not None and bool(traj.observed[i])

    def label(v):
        i = rows.get(v)
        return NO_LABEL if i is None else int(traj.labels[i])

    out = []
    for start in range(first, last + 1):
        if not observed(start):
            continue
        for T in range(2, max_T + 1):
            mask = tuple(not observed(start + j) for j in range(T))
            for tau in range(1, max_sum - T + 1):
                target = start + T - 1 + tau
                if target > last:
                    break
                lab = label(target)
                if lab == NO_LABEL:
                    continue
                out.append(Subtrajectory(traj.patient_id, start, T, tau, lab, mask))
    return out


def enumerate_cohort(cohort: Mapping[str, Trajectory], ids: Sequence[str] | None = None, limits=(4, 5)) -> list[Subtrajectory]:
    ids = sorted(cohort) if ids is None else list(ids)
    out = []
    for pid in ids:
        out.extend(enumerate_subtrajectories(cohort[pid], limits))
    return out


def expected_count(M: int, max_T: int = 4, max_sum: int = 5) -> int:
    """Samples from a fully observed, fully labeled record of M consecutive visits."""
    total = 0
    for T in range(2, min(max_T, M - 1) + 1):
        for tau in range(1, min(max_sum - T, M - T) + 1):
            total += M - T - tau + 1
    return total


def split_patients(cohort, spec: SplitSpec = SplitSpec()) -> tuple[list[str], list[str]]:
    """Seeded shuffle of the sorted patient ids, then a prefix split (train gets the floor)."""
    if not 0.0 < spec.train_fraction < 1.0:
        raise SplitConfigError(f"train_fraction must be in (0, 1), got {spec.train_fraction}")
    ids = sorted(cohort)
    if not ids:
        raise SplitConfigError("cannot split an empty cohort")
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = math.floor(spec.train_fraction * len(ids))
    return shuffled[:n_train], shuffled[n_train:]


# --------------------------------------------------------------------------
# Batch loaders
# --------------------------------------------------------------------------

def _by_length(samples: Sequence) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.T, []).append(i)
    return dict(sorted(groups.items()))


def uniform_random_indices(samples: Sequence, batch_size: int, seed: int, epochs: int | None = 1) -> Iterator[list[int]]:
    """Index batches for :func:`batches_uniform_random`."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    groups = _by_length(samples)
    epoch = 0
    while groups and (epochs is None or epoch < epochs):
        order = {T: [idx[i] for i in rng.permutation(len(idx))] for T, idx in groups.items()}
        pos = {T: 0 for T in groups}
        while True:
            available = [T for T in groups if pos[T] < len(order[T])]
            if not available:
                break
            T = available[int(rng.integers(len(available)))]
            yield order[T][pos[T]:pos[T] + batch_size]
            pos[T] += batch_size
        epoch += 1


def per_length_indices(samples: Sequence, batch_size: int, seed: int, epochs: int | None = 1) -> Iterator[list[int]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    groups = _by_length(samples)
    epoch = 0
    while groups and (epochs is None or epoch < epochs):
        for idx in groups.values():
            order = [idx[i] for i in rng.permutation(len(idx))]
            for k in range(0, len(order), batch_size):
                yield order[k:k + batch_size]
        epoch += 1


def batches_uniform_random(samples: Sequence, batch_size: int, seed: int, epochs: int | None = 1):
    """Each batch draws its length uniformly among lengths not yet exhausted this epoch.

    Every bucket is reshuffled at the start of an epoch and consumed without
    replacement, so each sample is emitted exactly once per epoch. The last
    batch of a bucket may be short.
    """
    for idx in uniform_random_indices(samples, batch_size, seed, epochs):
        yield [samples[i] for i in idx]


def batches_per_length(samples: Sequence, batch_size: int, seed: int, epochs: int | None = 1):
    """One epoch is a shuffled pass over each length bucket in ascending T."""
    for idx in per_length_indices(samples, batch_size, seed, epochs):
        yield [samples[i] for i in idx]


LOADERS = {"uniform_random": uniform_random_indices, "per_length": per_length_indices}


# --------------------------------------------------------------------------
# Augmentation report
# --------------------------------------------------------------------------

def bucket_counts(samples: Sequence[Subtrajectory]) -> Counter:
    return Counter(s.bucket for s in samples)


def augmentation_report(train: Sequence[Subtrajectory], test: Sequence[Subtrajectory], max_T=4, max_sum=5) -> list[dict]:
    """Rows (T, tau, split, count) over the full bucket domain, then per-split totals (T = tau = "all")."""
    rows = []
    for split, samples in (("train", train), ("test", test)):
        counts = bucket_counts(samples)
        for T in range(2, max_T + 1):
            for tau in range(1, max_sum - T + 1):
                rows.append({"T": T, "tau": tau, "split": split, "count": counts.get((T, tau), 0)})
        rows.append({"T": "all", "tau": "all", "split": split, "count": len(samples)})
    return rows


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["T", "tau", "split", "count"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
