"""Seeded generator of ADNI-like longitudinal cohorts.

Stages follow a monotone Markov chain on the 6-month visit grid. Each patient
carries a latent feature state that moves toward the mean of its current stage
by at most ``drift_magnitude`` per component per visit; observed volumetric and
cognitive features are that state plus Gaussian measurement noise.
Demographics are fixed per patient.

Per-patient randomness comes from ``patient_seed(cohort_seed, index)``
(splitmix64), so any patient can be regenerated on its own.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataio import NO_LABEL, Trajectory

CN, MCI, AD = 0, 1, 2

# reference cohort patient counts per class (CN, MCI, AD)
REFERENCE_STAGE_COUNTS = (805, 536, 317)

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def patient_seed(cohort_seed: int, index: int, stream: int = 0) -> int:
    """splitmix64(splitmix64(cohort_seed) ^ index ^ (stream << 48))."""
    return splitmix64(splitmix64(cohort_seed & _MASK64) ^ (index & _MASK64) ^ ((stream & 0xFFFF) << 48))


# streams drawn from the same patient seed
_STREAM_STAGES, _STREAM_FEATURES, _STREAM_MISSING = 0, 1, 2


def default_transition(p_cn_mci=0.03, p_mci_ad=0.08, p_cn_ad=0.001) -> list[list[float]]:
    return [
        [1.0 - p_cn_mci - p_cn_ad, p_cn_mci, p_cn_ad],
        [0.0, 1.0 - p_mci_ad, p_mci_ad],
        [0.0, 0.0, 1.0],
    ]


def _default_initial():
    total = sum(REFERENCE_STAGE_COUNTS)
    return [c / total for c in REFERENCE_STAGE_COUNTS]


class CohortConfigError(ValueError):
    pass


@dataclass
class CohortSpec:
    n_patients: int = 400
    visits_per_patient: tuple = (2, 8)
    dims: tuple = (32, 3, 4)
    initial_stage_probs: list = field(default_factory=_default_initial)
    step_transition: list = field(default_factory=default_transition)
    drift_magnitude: float = 0.25
    noise_sd: float = 0.5
    missing_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.visits_per_patient = tuple(int(v) for v in self.visits_per_patient)
        self.dims = tuple(int(d) for d in self.dims)
        self.validate()

    def validate(self) -> None:
        P = np.asarray(self.step_transition, dtype=float)
        if P.shape != (3, 3):
            raise CohortConfigError(f"step_transition must be 3x3, got {P.shape}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise CohortConfigError("step_transition rows must be non-negative and sum to 1")
        if np.any(np.tril(P, -1) != 0):
            raise CohortConfigError("step_transition allows a backward transition (stages must be monotone)")
        p0 = np.asarray(self.initial_stage_probs, dtype=float)
        if p0.shape != (3,) or np.any(p0 < 0) or abs(p0.sum() - 1.0) > 1e-12:
            raise CohortConfigError("initial_stage_probs must be 3 non-negative values summing to 1")
        lo, hi = self.visits_per_patient
        if not 1 <= lo <= hi:
            raise CohortConfigError(f"visits_per_patient must satisfy 1 <= lo <= hi, got {self.visits_per_patient}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise CohortConfigError(f"dims must be three positive counts, got {self.dims}")
        if not 0.0 <= self.missing_prob < 1.0:
            raise CohortConfigError(f"missing_prob must be in [0, 1), got {self.missing_prob}")
        if self.drift_magnitude < 0 or self.noise_sd < 0:
            raise CohortConfigError("drift_magnitude and noise_sd must be non-negative")
        if self.n_patients < 0:
            raise CohortConfigError("n_patients must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["visits_per_patient"] = list(self.visits_per_patient)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CohortConfigError(f"unknown cohort spec keys: {sorted(unknown)}")
        return cls(**d)


def class_means(spec: CohortSpec) -> tuple[np.ndarray, np.ndarray]:
    """Stage-conditional means, shape (3, dim), for volumetric and cognitive features.

    Volumetric means move one unit per stage along a random sign per component
    (atrophy in some regions, enlargement in others); cognitive means decline by
    one unit per stage.
    """
    dv, _, dc = spec.dims
    rng = np.random.default_rng(splitmix64(spec.seed ^ 0x5EED_C1A5))
    signs = rng.choice([-1.0, 1.0], size=dv)
    stage = np.arange(3, dtype=float)[:, None]
    return stage * signs[None, :], -stage * np.ones((1, dc))


def sample_stage_path(spec: CohortSpec, seed: int, n_visits: int | None = None) -> list[int]:
    """Monotone stage sequence: initial draw, then one Markov step per visit."""
    spec.validate()
    rng = np.random.default_rng(seed)
    lo, hi = spec.visits_per_patient
    n = int(rng.integers(lo, hi + 1)) if n_visits is None else n_visits
    P = np.asarray(spec.step_transition, dtype=float)
    s = int(rng.choice(3, p=np.asarray(spec.initial_stage_probs, dtype=float)))
    path = [s]
    for _ in range(n - 1):
        s = int(rng.choice(3, p=P[s]))
        path.append(s)
    return path


def emit_features(stage_path, spec: CohortSpec, seed: int, patient_id: str = "P0", means=None) -> Trajectory:
    """Fully observed trajectory for a stage path.

    With ``noise_sd = 0`` consecutive visits differ by at most
    ``drift_magnitude`` per component.
    """
    if len(stage_path) == 0:
        raise ValueError("stage path is empty")
    dv, ds, dc = spec.dims
    mu_v, mu_c = class_means(spec) if means is None else means
    mu = np.concatenate([mu_v, mu_c], axis=1)
    rng = np.random.default_rng(seed)
    n = len(stage_path)
    d = dv + dc
    eps = rng.standard_normal((n + 1, d))
    demo = rng.standard_normal(ds)
    state = mu[stage_path[0]] + spec.noise_sd * eps[0]
    rows = []
    for t, s in enumerate(stage_path):
        if t > 0:
            state = state + np.clip(mu[s] - state, -spec.drift_magnitude, spec.drift_magnitude)
        rows.append(state + spec.noise_sd * eps[t + 1])
    X = np.array(rows)
    return Trajectory(
        patient_id=patient_id,
        visits=np.arange(n, dtype=np.int64),
        labels=np.asarray(stage_path, dtype=np.int64),
        observed=np.ones(n, dtype=bool),
        volumetric=X[:, :dv],
        demographic=np.tile(demo, (n, 1)),
        cognitive=X[:, dv:],
    )


def apply_missingness(traj: Trajectory, missing_prob: float, seed: int) -> Trajectory:
    """Independently drop each non-first visit's features with ``missing_prob``; labels stay."""
    if not 0.0 <= missing_prob < 1.0:
        raise CohortConfigError(f"missing_prob must be in [0, 1), got {missing_prob}")
    rng = np.random.default_rng(seed)
    drop = rng.random(len(traj)) < missing_prob
    drop[0] = False
    observed = traj.observed & ~drop
    out = replace(
        traj,
        observed=observed,
        volumetric=traj.volumetric.copy(),
        demographic=traj.demographic.copy(),
        cognitive=traj.cognitive.copy(),
    )
    for arr in (out.volumetric, out.demographic, out.cognitive):
        arr[~observed] = np.nan
    return out


def generate_patient(spec: CohortSpec, index: int, means=None) -> Trajectory:
    pid = f"P{index:05d}"
    path = sample_stage_path(spec, patient_seed(spec.seed, index, _STREAM_STAGES))
    traj = emit_features(path, spec, patient_seed(spec.seed, index, _STREAM_FEATURES), pid, means)
    if spec.missing_prob > 0:
        traj = apply_missingness(traj, spec.missing_prob, patient_seed(spec.seed, index, _STREAM_MISSING))
    return traj


def generate_cohort(spec: CohortSpec) -> dict[str, Trajectory]:
    spec.validate()
    means = class_means(spec)
    cohort = {}
    for i in range(spec.n_patients):
        tr = generate_patient(spec, i, means)
        cohort[tr.patient_id] = tr
    return cohort


def transition_counts(cohort) -> dict[str, int]:
    """Stage changes between consecutive labeled visits, by type."""
    counts = {"CN->MCI": 0, "MCI->AD": 0, "CN->AD": 0}
    names = {(CN, MCI): "CN->MCI", (MCI, AD): "MCI->AD", (CN, AD): "CN->AD"}
    for tr in cohort.values():
        labs = [int(x) for x in tr.labels if x != NO_LABEL]
        for a, b in zip(labs[:-1], labs[1:]):
            if (a, b) in names:
                counts[names[(a, b)]] += 1
    return counts


def initial_stage_counts(cohort) -> list[int]:
    counts = [0, 0, 0]
    for tr in cohort.values():
        counts[int(tr.labels[0])] += 1
    return counts
