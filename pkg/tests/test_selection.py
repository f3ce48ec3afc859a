import numpy as np
import pytest

from gdsm.aggregation import Aggregator, aggregate
from gdsm.errors import NoDefinedColumns, SelectionLeakage, TooFewRows, UnfittedAggregator
from gdsm.selection import (
    PredictionMatrix,
    SelectionResult,
    canonical_columns,
    pearson_per_column,
    rank_columns,
    select_top,
)
from gdsm.extraction import SliceTable, default_regions

from .oracles import exact_rank


def matrix(values, targets, split="train"):
    values = np.asarray(values, dtype=float)
    meta = [{"stream": "global", "plane": "axial", "slice_index": j, "region": "", "encoded_label": 0}
            for j in range(values.shape[1])]
    return PredictionMatrix(values, meta, [f"s{i}" for i in range(len(targets))], targets, split)


def test_pearson_examples():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    m = matrix(np.column_stack([t, -t + 9, [1, 3, 2, 4], [5, 5, 5, 5]]), t)
    r = pearson_per_column(m)
    assert r[0] == pytest.approx(1.0) and r[1] == pytest.approx(-1.0)
    assert r[2] == pytest.approx(0.8, abs=1e-12)
    assert np.isnan(r[3])
    with pytest.raises(TooFewRows):
        pearson_per_column(matrix([[1.0]], [3.0]))


def test_rank_with_ties():
    assert rank_columns(np.array([0.9, 0.1, 0.9]))[:2] == [0, 2]
    assert rank_columns(np.array([np.nan, 0.3, 0.5])) == [2, 1]


def test_select_top_tie_rule_and_saturation():
    t = np.array([1.0, 2.0, 3.0, 4.0, 6.0])
    cols = np.column_stack([t + 1, [2, 1, 4, 3, 5], t * 2, [7, 7, 7, 7, 7]])
    m = matrix(cols, t)
    sel = select_top(m, 2)
    assert sel.indices == [0, 2]
    assert sel.source_split == "train" and sel.source_subjects == m.subject_ids
    sel_all = select_top(m, 10)
    assert sel_all.indices == [0, 2, 1]
    assert sel_all.correlations == sorted(sel_all.correlations, reverse=True)
    with pytest.raises(NoDefinedColumns):
        select_top(matrix(np.ones((4, 2)), t[:4]), 1)


def test_select_top_matches_exact_enumeration():
    rng = np.random.default_rng(7)
    for trial in range(60):
        n, m = rng.integers(3, 21), rng.integers(1, 51)
        vals = rng.integers(0, 5, size=(n, m)).astype(float)
        targets = rng.integers(0, 10, size=n).astype(float)
        targets[0] += 1  # keep targets non-constant
        expected = exact_rank(vals.T.tolist(), targets.tolist())
        mat = matrix(vals, targets)
        if not expected:
            continue
        c = int(rng.integers(1, m + 1))
        assert select_top(mat, c).indices == expected[:c]


def test_rank_invariance_under_target_shift_and_scale():
    rng = np.random.default_rng(1)
    t = rng.uniform(19, 77, 30)
    vals = t[:, None] + rng.normal(0, 5, (30, 12))
    base = select_top(matrix(vals, t), 4).indices
    assert select_top(matrix(vals, t + 100), 4).indices == base
    assert set(select_top(matrix(vals, t * 3.5), 4).indices) == set(base)


def test_selection_on_validation_rows_is_leakage():
    t = np.array([1.0, 2.0, 3.0])
    with pytest.raises(SelectionLeakage):
        select_top(matrix(np.column_stack([t, t]), t, split="val"), 1)


def test_matrix_round_trip(tmp_path):
    t = np.array([30.0, 40.0, 50.0])
    m = matrix(np.random.default_rng(0).normal(40, 5, (3, 4)), t)
    m.save(tmp_path / "m.gpm")
    back = PredictionMatrix.load(tmp_path / "m.gpm")
    np.testing.assert_array_equal(back.values, m.values)
    assert back.predictor_meta == m.predictor_meta and back.split == "train"
    sel = select_top(m, 2)
    sel.save(tmp_path / "s.json")
    assert SelectionResult.load(tmp_path / "s.json") == sel


def test_canonical_columns_count():
    cols = canonical_columns(default_regions(), SliceTable.default())
    assert len(cols) == 473 + 80
    streams = [c["stream"] for c in cols]
    assert streams == ["local"] * 473 + ["global"] * 80
    assert [c["plane"] for c in cols[:198]] == ["axial"] * 198
    assert cols[473]["slice_index"] == 30 and cols[-1] == {
        "stream": "global", "plane": "sagittal", "slice_index": 59, "region": "", "encoded_label": 2}


# ------------------------------------------------------------- aggregation


def test_average_aggregation():
    t = np.array([40.0, 50.0])
    m = matrix([[38, 40, 42, 0], [49, 51, 50, 0]], t)
    sel = SelectionResult([0, 1, 2], [1, 1, 1], "train", m.subject_ids)
    np.testing.assert_allclose(aggregate(m, sel, Aggregator("average")), [40.0, 50.0])
    v = np.array([33.3, 61.7])
    same = matrix(np.column_stack([v, v, v]), t)
    assert np.array_equal(aggregate(same, sel, Aggregator()), v)


def test_aggregation_rejects_non_training_selection():
    t = np.array([40.0, 50.0])
    m = matrix([[38, 40], [49, 51]], t)
    with pytest.raises(SelectionLeakage):
        aggregate(m, SelectionResult([0], [1.0], "val"), Aggregator())


def test_regression_aggregation_requires_fit():
    t = np.array([40.0, 50.0, 60.0])
    m = matrix([[38, 40], [49, 51], [61, 58]], t)
    sel = SelectionResult([0, 1], [1, 1], "train", m.subject_ids)
    with pytest.raises(UnfittedAggregator):
        aggregate(m, sel, Aggregator("regression", "linear"))
    with pytest.raises(SelectionLeakage):
        Aggregator("regression", "linear").fit(matrix(m.values, t, split="val"), sel)


@pytest.mark.parametrize("kind", ["linear", "support_vector", "random_forest"])
def test_regressors_fit(kind):
    rng = np.random.default_rng(3)
    t = rng.uniform(19, 77, 40)
    m = matrix(t[:, None] + rng.normal(0, 3, (40, 3)), t)
    sel = select_top(m, 3)
    agg = Aggregator("regression", kind, seed=0).fit(m, sel)
    out = aggregate(m, sel, agg)
    assert out.shape == (40,) and np.all(np.isfinite(out))


def test_linear_stacking_never_worse_than_mean_on_training_rows():
    rng = np.random.default_rng(5)
    for _ in range(20):
        t = rng.uniform(19, 77, 30)
        m = matrix(t[:, None] * rng.uniform(0.8, 1.2, 3) + rng.normal(0, 4, (30, 3)), t)
        sel = select_top(m, 3)
        avg = aggregate(m, sel, Aggregator())
        lin = aggregate(m, sel, Aggregator("regression", "linear").fit(m, sel))
        assert np.mean((lin - t) ** 2) <= np.mean((avg - t) ** 2) + 1e-9
