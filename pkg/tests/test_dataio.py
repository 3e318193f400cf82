from collections.abc import Mapping
from dataclasses import replace

import numpy as np
import pytest

from flare.dataio import (
    FitError,
    Manifest,
    SchemaError,
    apply_normalizer,
    fit_normalizer,
    load_cohort,
    manifest_path,
    read_manifest,
    save_cohort,
    write_manifest,
)
from flare.synthcohort import CohortSpec, generate_cohort

HEADER = "patient_id,visit,label,observed,v0,v1,s0,c0\n"


def write_csv(tmp_path, body, name="c.csv"):
    path = tmp_path / name
    path.write_text(HEADER + body, encoding="utf-8")
    write_manifest(manifest_path(path), Manifest(2, 1, 1))
    return path


def test_empty_file_gives_empty_cohort(tmp_path):
    assert load_cohort(write_csv(tmp_path, "")) == {}


def test_round_trip_exact(tmp_path):
    cohort = generate_cohort(CohortSpec(n_patients=15, missing_prob=0.25, seed=4))
    save_cohort(tmp_path / "c.csv", cohort)
    back = load_cohort(tmp_path / "c.csv")
    assert sorted(back) == sorted(cohort)
    for pid, tr in cohort.items():
        assert back[pid].equals(tr, atol=0.0)
        assert np.all(np.isnan(back[pid].volumetric[~tr.observed]))
    m = read_manifest(manifest_path(tmp_path / "c.csv"))
    assert (m.dim_v, m.dim_s, m.dim_c, m.n_patients) == (32, 3, 4, 15)


def test_rows_sorted_and_label_trimmed(tmp_path):
    path = write_csv(tmp_path, "a,2,AD ,1,1,2,3,4\na,0, CN,1,0.5,0.25,3,4\na,1,,0,,,,\n")
    tr = load_cohort(path)["a"]
    assert tr.visits.tolist() == [0, 1, 2]
    assert tr.labels.tolist() == [0, -1, 2]
    assert tr.observed.tolist() == [True, False, True]
    assert tr.volumetric[0].tolist() == [0.5, 0.25]


@pytest.mark.parametrize("body, match", [
    ("a,0,CN,1,1,2,3,4\na,0,MCI,1,1,2,3,4\n", "row 3: duplicate"),
    ("a,0,CN,1,1,nan,3,4\n", "row 2: observed row has a non-finite"),
    ("a,0,CN,1,1,inf,3,4\n", "non-finite"),
    ("a,0,SMC,1,1,2,3,4\n", "unknown label"),
    ("a,0,CN,1,1,,3,4\n", "row 2"),
    ("a,-1,CN,1,1,2,3,4\n", "negative visit"),
    ("a,0,CN,1,1,2,3\n", "columns"),
    ("a,x,CN,1,1,2,3,4\n", "not an integer"),
])
def test_schema_errors(tmp_path, body, match):
    with pytest.raises(SchemaError, match=match):
        load_cohort(write_csv(tmp_path, body))


def test_header_width_checked_against_manifest(tmp_path):
    path = write_csv(tmp_path, "")
    with pytest.raises(SchemaError):
        load_cohort(path, Manifest(3, 1, 1))


# ---------------------------------------------------------------- normalizer

def test_train_stats_after_transform():
    cohort = generate_cohort(CohortSpec(n_patients=40, missing_prob=0.2, seed=1))
    ids = sorted(cohort)[:30]
    norm = fit_normalizer(cohort, ids)
    X = np.concatenate([apply_normalizer(cohort[p], norm).features[cohort[p].observed] for p in ids])
    assert np.max(np.abs(X.mean(axis=0))) < 1e-10
    assert np.max(np.abs(X.std(axis=0) - 1.0)) < 1e-10


def test_constant_feature_maps_to_zero():
    cohort = generate_cohort(CohortSpec(n_patients=6, seed=2))
    for tr in cohort.values():
        tr.cognitive[:, 1] = 0.37
    norm = fit_normalizer(cohort, sorted(cohort))
    assert norm.sd[32 + 3 + 1] == 1e-8
    for tr in cohort.values():
        assert np.all(apply_normalizer(tr, norm).cognitive[:, 1] == 0.0)


def test_test_split_uses_train_statistics():
    cohort = generate_cohort(CohortSpec(n_patients=30, seed=3))
    ids = sorted(cohort)
    train, test = ids[:20], ids[20:]
    shifted = {p: replace(cohort[p], volumetric=cohort[p].volumetric + 5.0) if p in test else cohort[p] for p in ids}
    norm = fit_normalizer(shifted, train)
    Z = np.concatenate([apply_normalizer(shifted[p], norm).volumetric for p in test])
    assert Z.mean() > 1.0


class CountingCohort(Mapping):
    """Mapping that records which patients were read."""

    def __init__(self, data):
        self._data = data
        self.reads = []

    def __getitem__(self, key):
        self.reads.append(key)
        return self._data[key]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)


def test_normalizer_never_reads_test_rows():
    cohort = CountingCohort(generate_cohort(CohortSpec(n_patients=20, seed=5)))
    train = sorted(cohort)[:15]
    fit_normalizer(cohort, train)
    assert set(cohort.reads) <= set(train)


def test_fit_needs_two_visits():
    cohort = generate_cohort(CohortSpec(n_patients=2, visits_per_patient=(2, 2), seed=0))
    pid = sorted(cohort)[0]
    one = {pid: replace(cohort[pid], observed=np.array([True, False]))}
    with pytest.raises(FitError):
        fit_normalizer(one, [pid])


def test_normalizer_serialization():
    cohort = generate_cohort(CohortSpec(n_patients=5, seed=0))
    norm = fit_normalizer(cohort, sorted(cohort))
    back = type(norm).from_dict(norm.to_dict())
    assert np.array_equal(back.mean, norm.mean) and np.array_equal(back.sd, norm.sd)
