"""Cohort CSV format, trajectory assembly and train-split normalization.

CSV layout (UTF-8, comma separated, header row required)::

    patient_id,visit,label,observed,v0..v{dv-1},s0..s{ds-1},c0..c{dc-1}

``visit`` is a non-negative integer on the 6-month grid, ``label`` is one of
CN/MCI/AD or empty, ``observed`` is 1/0 (true/false also accepted). Feature
cells of unobserved rows are left empty. A JSON sidecar manifest named
``<stem>.manifest.json`` declares ``dim_v``, ``dim_s``, ``dim_c`` and
``n_patients``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

LABELS = ("CN", "MCI", "AD")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
NO_LABEL = -1
SD_FLOOR = 1e-8


class SchemaError(ValueError):
    """The cohort file violates the schema."""


class FitError(ValueError):
    pass


@dataclass
class Trajectory:
    """One patient's visits in visit order.

    Feature rows of unobserved visits are NaN. ``labels`` uses -1 for a visit
    without a recorded stage.
    """

    patient_id: str
    visits: np.ndarray
    labels: np.ndarray
    observed: np.ndarray
    volumetric: np.ndarray
    demographic: np.ndarray
    cognitive: np.ndarray

    def __len__(self) -> int:
        return len(self.visits)

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.volumetric, self.demographic, self.cognitive], axis=1)

    def row_of(self) -> dict[int, int]:
        return {int(v): i for i, v in enumerate(self.visits)}

    def equals(self, other: "Trajectory", atol: float = 0.0) -> bool:
        if self.patient_id != other.patient_id:
            return False
        for name in ("visits", "labels", "observed"):
            if not np.array_equal(getattr(self, name), getattr(other, name)):
                return False
        for name in ("volumetric", "demographic", "cognitive"):
            a, b = getattr(self, name), getattr(other, name)
            if a.shape != b.shape:
                return False
            obs = self.observed
            if not np.allclose(a[obs], b[obs], rtol=0.0, atol=atol):
                return False
        return True


@dataclass(frozen=True)
class Manifest:
    dim_v: int
    dim_s: int
    dim_c: int
    n_patients: int = 0

    @property
    def n_features(self) -> int:
        return self.dim_v + self.dim_s + self.dim_c

    def columns(self) -> list[str]:
        return (
            ["patient_id", "visit", "label", "observed"]
            + [f"v{i}" for i in range(self.dim_v)]
            + [f"s{i}" for i in range(self.dim_s)]
            + [f"c{i}" for i in range(self.dim_c)]
        )


def manifest_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".manifest.json")


def read_manifest(path) -> Manifest:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    try:
        return Manifest(int(d["dim_v"]), int(d["dim_s"]), int(d["dim_c"]), int(d.get("n_patients", 0)))
    except KeyError as exc:
        raise SchemaError(f"{path}: manifest is missing {exc.args[0]!r}") from exc


def write_manifest(path, manifest: Manifest, extra: dict | None = None) -> None:
    d = {"dim_v": manifest.dim_v, "dim_s": manifest.dim_s, "dim_c": manifest.dim_c, "n_patients": manifest.n_patients}
    if extra:
        d.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_bool(tok: str, row_no: int) -> bool:
    t = tok.strip().lower()
    if t in ("1", "true", "t", "yes"):
        return True
    if t in ("0", "false", "f", "no"):
        return False
    raise SchemaError(f"row {row_no}: observed flag {tok!r} is not a boolean")


def load_cohort(path, manifest: Manifest | None = None) -> dict[str, Trajectory]:
    """Parse a cohort CSV into trajectories keyed by patient id, each sorted by visit."""
    path = Path(path)
    if manifest is None:
        manifest = read_manifest(manifest_path(path))
    dv, ds = manifest.dim_v, manifest.dim_s
    nf = manifest.n_features
    rows: dict[str, list] = {}
    seen: set[tuple[str, int]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: missing header row")
        if len(header) != 4 + nf:
            raise SchemaError(f"{path}: header has {len(header)} columns, manifest implies {4 + nf}")
        for row_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4 + nf:
                raise SchemaError(f"row {row_no}: expected {4 + nf} columns, got {len(rec)}")
            pid = rec[0].strip()
            try:
                visit = int(rec[1])
            except ValueError as exc:
                raise SchemaError(f"row {row_no}: visit index {rec[1]!r} is not an integer") from exc
            if visit < 0:
                raise SchemaError(f"row {row_no}: negative visit index {visit}")
            if (pid, visit) in seen:
                raise SchemaError(f"row {row_no}: duplicate (patient, visit) = ({pid}, {visit})")
            seen.add((pid, visit))
            tok = rec[2].strip()
            if tok == "":
                label = NO_LABEL
            elif tok in LABEL_INDEX:
                label = LABEL_INDEX[tok]
            else:
                raise SchemaError(f"row {row_no}: unknown label {rec[2]!r}")
            observed = _parse_bool(rec[3], row_no)
            feats = np.full(nf, np.nan)
            if observed:
                try:
                    feats[:] = [float(x) for x in rec[4:]]
                except ValueError as exc:
                    raise SchemaError(f"row {row_no}: observed row has an empty or non-numeric feature") from exc
                if not np.all(np.isfinite(feats)):
                    raise SchemaError(f"row {row_no}: observed row has a non-finite feature")
            rows.setdefault(pid, []).append((visit, label, observed, feats))
    cohort = {}
    for pid, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        feats = np.array([r[3] for r in recs]).reshape(len(recs), nf)
        cohort[pid] = Trajectory(
            patient_id=pid,
            visits=np.array([r[0] for r in recs], dtype=np.int64),
            labels=np.array([r[1] for r in recs], dtype=np.int64),
            observed=np.array([r[2] for r in recs], dtype=bool),
            volumetric=feats[:, :dv],
            demographic=feats[:, dv:dv + ds],
            cognitive=feats[:, dv + ds:],
        )
    return cohort


def save_cohort(path, cohort: Mapping[str, Trajectory] | Iterable[Trajectory], extra_manifest: dict | None = None) -> Manifest:
    """Write the CSV and its manifest. Floats use ``repr`` so values round-trip exactly."""
    trajs = list(cohort.values()) if isinstance(cohort, Mapping) else list(cohort)
    if trajs:
        t0 = trajs[0]
        manifest = Manifest(t0.volumetric.shape[1], t0.demographic.shape[1], t0.cognitive.shape[1], len(trajs))
    else:
        extra = extra_manifest or {}
        manifest = Manifest(extra.get("dim_v", 0), extra.get("dim_s", 0), extra.get("dim_c", 0), 0)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(manifest.columns())
        for tr in trajs:
            feats = tr.features
            for i in range(len(tr)):
                lab = "" if tr.labels[i] == NO_LABEL else LABELS[tr.labels[i]]
                if tr.observed[i]:
                    cells = [repr(float(x)) for x in feats[i]]
                else:
                    cells = [""] * manifest.n_features
                w.writerow([tr.patient_id, int(tr.visits[i]), lab, 1 if tr.observed[i] else 0, *cells])
    write_manifest(manifest_path(path), manifest, extra_manifest)
    return manifest


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    sd: np.ndarray
    fitted_on: str = "train"

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist(), "fitted_on": self.fitted_on}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["sd"], dtype=float), d.get("fitted_on", "train"))

    def transform(self, traj: Trajectory) -> Trajectory:
        return apply_normalizer(traj, self)


def fit_normalizer(cohort: Mapping[str, Trajectory], train_ids: Iterable[str]) -> Normalizer:
    """Per-feature z-score statistics over observed visits of the training patients only."""
    blocks = []
    for pid in train_ids:
        tr = cohort[pid]
        blocks.append(tr.features[tr.observed])
    X = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, 0))
    if X.shape[0] < 2:
        raise FitError(f"need at least 2 observed training visits to fit a normalizer, got {X.shape[0]}")
    # constant columns: take the value itself so they map to exactly 0
    mean = np.where(np.ptp(X, axis=0) == 0, X[0], X.mean(axis=0))
    sd = np.maximum(X.std(axis=0), SD_FLOOR)
    return Normalizer(mean, sd)


def apply_normalizer(traj: Trajectory, norm: Normalizer) -> Trajectory:
    dv, ds = traj.volumetric.shape[1], traj.demographic.shape[1]
    z = (traj.features - norm.mean) / norm.sd
    return replace(traj, volumetric=z[:, :dv], demographic=z[:, dv:dv + ds], cognitive=z[:, dv + ds:])


def cohort_stage_counts(cohort: Mapping[str, Trajectory]) -> dict[str, int]:
    counts = {name: 0 for name in LABELS}
    for tr in cohort.values():
        for lab in tr.labels:
            if lab != NO_LABEL:
                counts[LABELS[lab]] += 1
    return counts

