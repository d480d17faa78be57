"""Correlation formula, subset search, and the uncorrelated-feature defense."""

import itertools
import math

import numpy as np
import pytest

from gaitlock.corpus import synth_corpus
from gaitlock.errors import DimError, SelectionError
from gaitlock.forest import ForestParams, LabeledMatrix, crossval
from gaitlock.model import DeviceKind, SensorKind, schema_for_mode
from gaitlock.selection import (
    CorrelationMatrix,
    SensorSubset,
    correlation,
    correlation_matrix,
    defense_superset,
    matrix_correlations,
    sensor_subset_search,
    uncorrelated_subset,
    write_heatmap_csv,
)

SCHEMA = tuple(schema_for_mode("phone"))


def two_pass_pearson(x, y):
    """Independent oracle: classic mean-centered two-pass formula."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0:
        return None
    return float(dx @ dy) / denom


def test_correlation_examples():
    assert correlation([1, 2, 3], [1, 2, 3]) == 1.0
    assert correlation([1, 2, 3], [3, 2, 1]) == -1.0
    assert abs(correlation([1, 2, 3, 4], [1, 3, 2, 4]) - 0.8) < 1e-12
    assert abs(two_pass_pearson([1, 2, 3, 4], [1, 3, 2, 4]) - 0.8) < 1e-12


def test_correlation_errors_and_undefined():
    with pytest.raises(DimError):
        correlation([1, 2], [1, 2, 3])
    with pytest.raises(DimError):
        correlation([1], [1])
    assert correlation([2, 2, 2], [1, 2, 3]) is None


def test_correlation_matches_two_pass_oracle():
    rng = np.random.default_rng(14)
    for _ in range(100):
        n = int(rng.integers(3, 1001))
        x = rng.normal(scale=rng.uniform(0.5, 5.0), size=n)
        y = rng.normal(scale=rng.uniform(0.5, 5.0), size=n)
        assert abs(correlation(x, y) - two_pass_pearson(x, y)) < 1e-9


def test_correlation_affine_invariance():
    rng = np.random.default_rng(15)
    for _ in range(50):
        x = rng.normal(size=60)
        y = rng.normal(size=60)
        base = correlation(x, y)
        a = float(rng.uniform(0.1, 9.0))
        b = float(rng.uniform(-5, 5))
        assert abs(correlation(a * x + b, y) - base) < 1e-9
        assert abs(correlation(-a * x + b, y) + base) < 1e-9


def test_correlation_matrix_basics():
    rng = np.random.default_rng(16)
    col = rng.normal(size=50)
    X = np.column_stack([col, col, -col, rng.normal(size=50),
                         np.full(50, 3.0)])
    cm = correlation_matrix(X, SCHEMA[:5])
    assert cm.sigma[0, 1] == 1.0
    assert cm.sigma[0, 2] == -1.0
    assert np.isnan(cm.sigma[0, 4]) and np.isnan(cm.sigma[4, 4])
    assert not cm.defined(0, 4)
    defined = ~np.isnan(cm.sigma)
    assert np.array_equal(cm.sigma[defined],
                          cm.sigma.T[defined.T])
    assert all(cm.sigma[i, i] == 1.0 for i in range(4))


def test_correlation_matrix_null_distribution():
    rng = np.random.default_rng(17)
    X = rng.normal(size=(500, 30))
    cm = correlation_matrix(X, SCHEMA[:30])
    off = np.abs(cm.sigma[np.triu_indices(30, k=1)])
    assert np.mean(off < 0.15) >= 0.99


def test_heatmap_csv(tmp_path):
    rng = np.random.default_rng(18)
    cm = correlation_matrix(rng.normal(size=(20, 4)), SCHEMA[:4])
    path = tmp_path / "corr.csv"
    write_heatmap_csv(cm, path)
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    assert header[0] == "" and len(header) == 5
    assert len(lines) == 5
    assert lines[1].split(",")[0] == header[1]


def test_sensor_subset_render_parse():
    paper_phone = SensorSubset(
        phone=frozenset({SensorKind.ACCELEROMETER, SensorKind.GYROSCOPE,
                         SensorKind.MAGNETIC_FIELD, SensorKind.ORIENTATION}))
    paper_watch = SensorSubset(
        watch=frozenset({SensorKind.ACCELEROMETER, SensorKind.GRAVITY,
                         SensorKind.GYROSCOPE, SensorKind.LINEAR_ACCELERATION,
                         SensorKind.MAGNETIC_FIELD}))
    for subset in (paper_phone, paper_watch):
        assert SensorSubset.parse(subset.render()) == subset
    assert paper_phone.size() == 4
    assert paper_watch.size() == 5
    with pytest.raises(SelectionError):
        SensorSubset()


def _signal_only_phone_accel_corpus(seed=19, users=3, sessions=10):
    """Synthetic corpus where only phone accelerometer differs by user."""
    corpus = synth_corpus(seed, users, sessions)
    rng = np.random.default_rng(seed)
    for s in corpus.sessions:
        for (dev, sen), tr in s.traces.items():
            if (dev, sen) == (DeviceKind.PHONE, SensorKind.ACCELEROMETER):
                continue
            tr.xyz[:] = rng.normal(size=tr.xyz.shape)  # wipe to shared noise
    return corpus


def test_subset_search_finds_signal_sensor():
    corpus = _signal_only_phone_accel_corpus()
    # oracle: some phone-accel feature separates user01 by plain threshold
    from gaitlock.experiment import user_matrix
    m = user_matrix(corpus, "user01", 19)
    accel_cols = [i for i, f in enumerate(m.schema)
                  if (f.device, f.sensor)
                  == (DeviceKind.PHONE, SensorKind.ACCELEROMETER)]
    separating = [
        c for c in accel_cols
        if m.X[m.y == 1, c].max() < m.X[m.y == 0, c].min()
        or m.X[m.y == 0, c].max() < m.X[m.y == 1, c].min()]
    assert separating

    params = ForestParams(n_trees=7)
    reports = sensor_subset_search(corpus, "user01", "combined_greedy", 2,
                                   params, 19)
    top = reports[0]
    assert SensorKind.ACCELEROMETER in top.subset.phone


def test_subset_search_per_device_count():
    corpus = synth_corpus(20, 2, 4)
    params = ForestParams(n_trees=1, features_per_split=4)
    reports = sensor_subset_search(corpus, "user01", "per_device_exhaustive",
                                   2, params, 20, device=DeviceKind.PHONE)
    assert len(reports) == 255
    assert [r.rank for r in reports] == list(range(1, 256))
    assert all(not r.subset.watch for r in reports)


def test_subset_search_combined_exhaustive_small():
    corpus = synth_corpus(21, 2, 4)
    for s in corpus.sessions:  # keep only 2+2 sensors -> 15 candidate subsets
        keep = {(DeviceKind.PHONE, SensorKind.ACCELEROMETER),
                (DeviceKind.PHONE, SensorKind.GYROSCOPE),
                (DeviceKind.WATCH, SensorKind.ACCELEROMETER),
                (DeviceKind.WATCH, SensorKind.GYROSCOPE)}
        for key in list(s.traces):
            if key not in keep:
                del s.traces[key]
    params = ForestParams(n_trees=1, features_per_split=4)
    reports = sensor_subset_search(corpus, "user01", "combined_exhaustive",
                                   2, params, 21)
    assert len(reports) == 15


def test_subset_search_requires_device():
    corpus = synth_corpus(22, 2, 4)
    with pytest.raises(SelectionError):
        sensor_subset_search(corpus, "user01", "per_device_exhaustive", 2,
                             ForestParams(n_trees=1), 22)


def _matrix_from_sigma(sigma):
    return CorrelationMatrix(SCHEMA[:len(sigma)], np.asarray(sigma, dtype=float))


def _importance(ranks):
    return {SCHEMA[i]: v for i, v in enumerate(ranks)}


def test_uncorrelated_identity_keeps_all():
    cm = _matrix_from_sigma(np.eye(10))
    out = uncorrelated_subset(cm, 0.1, _importance([1.0] * 10))
    assert out == list(SCHEMA[:10])


def test_uncorrelated_dense_keeps_most_important():
    sigma = np.full((6, 6), 0.9)
    np.fill_diagonal(sigma, 1.0)
    cm = _matrix_from_sigma(sigma)
    imp = _importance([0.1, 0.9, 0.3, 0.2, 0.05, 0.4])
    out = uncorrelated_subset(cm, 0.1, imp)
    assert out == [SCHEMA[1]]


def test_uncorrelated_greedy_vs_exact():
    # feature 0 (most important) conflicts with everything except itself;
    # features 1,2,3 are mutually compatible; greedy keeps {0,4}, exact {1,2,3}
    sigma = np.eye(5)
    conflicts = {(0, 1), (0, 2), (0, 3), (1, 4), (2, 4), (3, 4)}
    for i, j in conflicts:
        sigma[i, j] = sigma[j, i] = 0.8
    cm = _matrix_from_sigma(sigma)
    imp = _importance([1.0, 0.4, 0.3, 0.2, 0.5])
    greedy = uncorrelated_subset(cm, 0.1, imp, mode="greedy")
    exact = uncorrelated_subset(cm, 0.1, imp, mode="exact")
    assert len(greedy) == 2
    assert len(exact) == 3

    # brute-force oracle over all 2^5 subsets
    best = 0
    for r in range(1, 6):
        for combo in itertools.combinations(range(5), r):
            if all(abs(sigma[a, b]) < 0.1
                   for a, b in itertools.combinations(combo, 2)):
                best = max(best, r)
    assert best == len(exact)


def test_uncorrelated_contract_and_maximality():
    rng = np.random.default_rng(23)
    for _ in range(30):
        d = int(rng.integers(4, 13))
        sigma = np.eye(d)
        for i, j in itertools.combinations(range(d), 2):
            sigma[i, j] = sigma[j, i] = rng.uniform(-1, 1)
        cm = _matrix_from_sigma(sigma)
        imp = _importance(rng.uniform(size=d).tolist())
        out = uncorrelated_subset(cm, 0.1, imp, mode="greedy")
        idx = [list(cm.schema).index(f) for f in out]
        for a, b in itertools.combinations(idx, 2):
            assert abs(sigma[a, b]) < 0.1
        for other in set(range(d)) - set(idx):  # maximal: nothing addable
            assert any(abs(sigma[other, a]) >= 0.1 for a in idx)


def test_uncorrelated_validation():
    cm = _matrix_from_sigma(np.eye(3))
    with pytest.raises(SelectionError):
        uncorrelated_subset(cm, 0.0, {})
    with pytest.raises(SelectionError):
        uncorrelated_subset(cm, 1.0, {})
    big = CorrelationMatrix(SCHEMA[:30], np.eye(30))
    with pytest.raises(SelectionError):
        uncorrelated_subset(big, 0.1, {}, mode="exact")


def test_uncorrelated_excludes_undefined_and_warns():
    sigma = np.full((3, 3), np.nan)
    cm = _matrix_from_sigma(sigma)
    with pytest.warns(UserWarning):
        assert uncorrelated_subset(cm, 0.1, {}) == []


def _separable_two_feature_matrix(seed=24):
    rng = np.random.default_rng(seed)
    n = 30
    weak = np.concatenate([rng.normal(0, 1, n), rng.normal(0.4, 1, n)])
    strong = np.concatenate([rng.normal(0, 0.3, n), rng.normal(6, 0.3, n)])
    y = np.array([0] * n + [1] * n, dtype=np.int8)
    X = np.column_stack([weak, strong])
    return LabeledMatrix(SCHEMA[:2], X, y)


def test_defense_superset_adds_separating_feature():
    data = _separable_two_feature_matrix()
    # oracle: the second column separates perfectly on its own
    strong = data.X[:, 1]
    assert strong[data.y == 0].max() < strong[data.y == 1].min()
    params = ForestParams(n_trees=9)
    core = [SCHEMA[0]]
    out = defense_superset(core, data, 3, params, 24)
    assert SCHEMA[0] in out and SCHEMA[1] in out


def test_defense_superset_keeps_perfect_core():
    data = _separable_two_feature_matrix()
    core = [SCHEMA[1]]
    params = ForestParams(n_trees=9)
    assert crossval(data.restrict(core), 3, params, 24).f_measure == 1.0
    out = defense_superset(core, data, 3, params, 24)
    assert out == core


def test_defense_superset_always_contains_core(small_matrix):
    params = ForestParams(n_trees=5)
    core = list(small_matrix.schema[:3])
    out = defense_superset(core, small_matrix.restrict(small_matrix.schema[:8]),
                           3, params, 1)
    assert set(core) <= set(out)


def test_matrix_correlations_positive_rows(small_matrix):
    cm = matrix_correlations(small_matrix, positive_only=True)
    assert len(cm.schema) == len(small_matrix.schema)
    assert cm.sigma.shape == (336, 336)


def test_subset_rankings_deterministic():
    corpus = synth_corpus(25, 2, 6)
    params = ForestParams(n_trees=3)
    a = sensor_subset_search(corpus, "user01", "combined_greedy", 2, params, 25)
    b = sensor_subset_search(corpus, "user01", "combined_greedy", 2, params, 25)
    assert [(r.rank, r.subset.render(), r.report.f_measure) for r in a] \
        == [(r.rank, r.subset.render(), r.report.f_measure) for r in b]


def test_subset_fusion_dominance():
    corpus = synth_corpus(26, 3, 10)
    params = ForestParams(n_trees=9)
    best = {}
    for label, devices in (("phone", {DeviceKind.PHONE}),
                           ("watch", {DeviceKind.WATCH}),
                           ("both", None)):
        top = sensor_subset_search(corpus, "user01", "combined_greedy", 3,
                                   params, 26, devices=devices)[0]
        best[label] = top.report.f_measure
    assert best["both"] >= max(best["phone"], best["watch"]) - 0.02
