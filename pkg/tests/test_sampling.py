from collections import Counter, namedtuple
from itertools import islice

import numpy as np
import pytest

from flare.dataio import NO_LABEL, Trajectory
from flare.sampling import (
    SplitConfigError,
    SplitSpec,
    augmentation_report,
    batches_per_length,
    batches_uniform_random,
    enumerate_cohort,
    enumerate_subtrajectories,
    expected_count,
    report_csv,
    split_patients,
)

S = namedtuple("S", "T idx")


def make_traj(labels, observed=None, visits=None, pid="p", dims=(2, 1, 1)):
    n = len(labels)
    visits = np.arange(n) if visits is None else np.asarray(visits)
    observed = np.ones(n, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    rng = np.random.default_rng(0)
    arrs = [rng.normal(size=(n, d)) for d in dims]
    for a in arrs:
        a[~observed] = np.nan
    return Trajectory(pid, visits.astype(np.int64), np.asarray(labels, dtype=np.int64), observed, *arrs)


def brute_force(labels, observed, visits, max_T=4, max_sum=5):
    """Independent oracle: try every (start, T, tau) over the full visit-index range."""
    obs = {v: o for v, o in zip(visits, observed)}
    lab = {v: l for v, l in zip(visits, labels)}
    out = []
    lo, hi = min(visits), max(visits)
    for start in range(lo, hi + 1):
        for T in range(1, hi - lo + 2):
            for tau in range(0, hi - lo + 2):
                target = start + T - 1 + tau
                ok = (
                    2 <= T <= max_T and 1 <= tau and T + tau <= max_sum
                    and obs.get(start, False)
                    and lab.get(target, NO_LABEL) != NO_LABEL
                )
                if ok:
                    mask = tuple(not obs.get(start + j, False) for j in range(T))
                    out.append((start, T, tau, lab[target], mask))
    return sorted(out)


def as_tuples(samples):
    return sorted((s.window_start, s.T, s.tau, s.target_label, s.missing_mask) for s in samples)


# ---------------------------------------------------------------- enumeration

def test_worked_example_two_windows():
    tr = make_traj([0, 1, 1, 2])
    got = [s for s in enumerate_subtrajectories(tr, (2, 3)) if (s.T, s.tau) == (2, 1)]
    assert [(s.window_start, s.T, s.target_visit, s.target_label) for s in got] == [(0, 2, 2, 1), (1, 2, 3, 2)]
    assert len(enumerate_subtrajectories(tr, (2, 3))) == 2


def test_four_visit_record_gives_four_samples():
    got = enumerate_subtrajectories(make_traj([0, 0, 1, 1]))
    assert Counter(s.bucket for s in got) == {(2, 1): 2, (2, 2): 1, (3, 1): 1}


def test_short_records():
    assert enumerate_subtrajectories(make_traj([0])) == []
    assert enumerate_subtrajectories(make_traj([])) == []


@pytest.mark.parametrize("M", range(2, 9))
def test_fully_observed_matches_brute_force(M):
    labels = list(np.random.default_rng(M).integers(0, 3, M))
    got = enumerate_subtrajectories(make_traj(labels))
    assert as_tuples(got) == brute_force(labels, [True] * M, list(range(M)))
    assert len(got) == expected_count(M)


def test_count_law_closed_form():
    # M=2: no visit left to forecast; M=3: (2,1) once; M=5: (2,*) 3+2+1, (3,*) 2+1, (4,1) 1
    assert [expected_count(M) for M in (2, 3, 4, 5)] == [0, 1, 4, 3 + 2 + 1 + 2 + 1 + 1]


def test_random_missingness_matches_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        M = int(rng.integers(1, 10))
        visits = np.sort(rng.choice(12, size=M, replace=False))  # gaps in the visit grid
        observed = rng.random(M) < 0.7
        labels = np.where(rng.random(M) < 0.8, rng.integers(0, 3, M), NO_LABEL)
        tr = make_traj(labels, observed, visits)
        got = enumerate_subtrajectories(tr)
        assert as_tuples(got) == brute_force(list(labels), list(observed), list(visits))
        for s in got:
            assert not s.missing_mask[0]
            assert 2 <= s.T <= 4 and 1 <= s.tau and s.T + s.tau <= 5


def test_enumeration_order():
    got = enumerate_subtrajectories(make_traj([0] * 7))
    keys = [(s.window_start, s.T, s.tau) for s in got]
    assert keys == sorted(keys)


# ---------------------------------------------------------------- split

def test_split_small_and_deterministic():
    cohort = {f"p{i}": None for i in range(10)}
    tr, te = split_patients(cohort, SplitSpec(0.8, 3))
    assert (len(tr), len(te)) == (8, 2)
    assert not set(tr) & set(te) and set(tr) | set(te) == set(cohort)
    assert (tr, te) == split_patients(cohort, SplitSpec(0.8, 3))


def test_split_1652_patients():
    cohort = {f"p{i:04d}": None for i in range(1652)}
    tr, te = split_patients(cohort, SplitSpec(0.8, 0))
    assert (len(tr), len(te)) == (1321, 331)


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
def test_split_fraction_validation(frac):
    with pytest.raises(SplitConfigError):
        split_patients({"a": None, "b": None}, SplitSpec(frac, 0))


def test_no_patient_leakage():
    cohort = {f"p{i}": make_traj([0, 0, 1, 1, 2], pid=f"p{i}") for i in range(20)}
    tr, te = split_patients(cohort, SplitSpec(0.8, 1))
    assert all(s.patient_id in set(tr) for s in enumerate_cohort(cohort, tr))
    assert all(s.patient_id in set(te) for s in enumerate_cohort(cohort, te))


# ---------------------------------------------------------------- loaders

def samples_with(counts):
    out = []
    for T, n in sorted(counts.items()):
        out += [S(T, len(out) + i) for i in range(n)]
    return out


@pytest.mark.parametrize("loader", [batches_uniform_random, batches_per_length])
def test_batches_are_homogeneous_and_cover_epoch_once(loader):
    samples = samples_with({2: 23, 3: 11, 4: 7})
    batches = list(loader(samples, 4, seed=9))
    for b in batches:
        assert len({s.T for s in b}) == 1
        assert 1 <= len(b) <= 4
    seen = Counter(s.idx for b in batches for s in b)
    assert seen == Counter(range(len(samples)))


@pytest.mark.parametrize("loader", [batches_uniform_random, batches_per_length])
def test_loader_determinism_and_reshuffle(loader):
    samples = samples_with({2: 30, 3: 30})
    a = [[s.idx for s in b] for b in loader(samples, 5, seed=1, epochs=2)]
    b = [[s.idx for s in b] for b in loader(samples, 5, seed=1, epochs=2)]
    assert a == b
    half = len(a) // 2
    assert a[:half] != a[half:]  # new permutation each epoch


def test_single_bucket():
    samples = samples_with({2: 17})
    assert all(b[0].T == 2 for b in batches_uniform_random(samples, 4, seed=0))


def test_uniform_length_frequency_within_three_sigma():
    # buckets large enough that none is exhausted during the first 10k draws
    samples = samples_with({2: 12000, 3: 12000, 4: 12000})
    n = 10000
    draws = Counter(b[0].T for b in islice(batches_uniform_random(samples, 1, seed=42), n))
    sigma = np.sqrt(n * (1 / 3) * (2 / 3))
    for T in (2, 3, 4):
        assert abs(draws[T] - n / 3) <= 3 * sigma


def test_per_length_ceiling_arithmetic():
    samples = samples_with({2: 5, 3: 3})
    batches = list(batches_per_length(samples, 2, seed=0))
    assert [b[0].T for b in batches] == [2, 2, 2, 3, 3]
    assert [len(b) for b in batches] == [2, 2, 1, 2, 1]


# ---------------------------------------------------------------- report

def test_augmentation_report_shape():
    tr = enumerate_subtrajectories(make_traj([0] * 6))
    te = enumerate_subtrajectories(make_traj([0] * 3))
    rows = augmentation_report(tr, te)
    per_split = [r for r in rows if r["split"] == "train" and r["T"] != "all"]
    assert [(r["T"], r["tau"]) for r in per_split] == [(2, 1), (2, 2), (2, 3), (3, 1), (3, 2), (4, 1)]
    totals = {r["split"]: r["count"] for r in rows if r["T"] == "all"}
    assert totals == {"train": len(tr), "test": len(te)}
    assert sum(r["count"] for r in per_split) == len(tr)
    assert report_csv(rows).splitlines()[0] == "T,tau,split,count"
