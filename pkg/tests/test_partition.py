import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlstm_soh.errors import ProvenanceError, StateError, ValidationError
from qlstm_soh.features import FeatureTable
from qlstm_soh.partition import (
    Normalizer, SplitPlan, apply_normalizer, assert_disjoint, fit_normalizer, make_windows, partition_table, split_cells,
)


def make_table(lengths, seed=0):
    rng = np.random.default_rng(seed)
    cells, cycles = [], []
    for j, n in enumerate(lengths):
        cells += [f"C{j}"] * n
        cycles += list(range(1, n + 1))
    n = len(cells)
    return FeatureTable(cells, cycles, rng.normal(size=(n, 13)), rng.uniform(0.8, 1, n))


def test_loocv_four_cells():
    plans = split_cells(["a", "b", "c", "d"], "loocv")
    assert len(plans) == 4
    assert [p.test_cells for p in plans] == [("a",), ("b",), ("c",), ("d",)]
    for p in plans:
        assert len(p.train_cells) == 3 and not set(p.train_cells) & set(p.test_cells)


def test_fixed_ratio_is_deterministic():
    cells = [f"c{i}" for i in range(10)]
    a = split_cells(cells, "fixed", seed=3)[0]
    b = split_cells(list(reversed(cells)), "fixed", seed=3)[0]
    assert a == b
    assert len(a.train_cells) == 8 and len(a.test_cells) == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(0, 1000), st.floats(0.05, 0.95))
def test_fixed_split_disjoint_cover(n, seed, frac):
    cells = [f"c{i}" for i in range(n)]
    p = split_cells(cells, "fixed", seed, frac)[0]
    assert not set(p.train_cells) & set(p.test_cells)
    assert set(p.train_cells) | set(p.test_cells) == set(cells)
    assert p.train_cells and p.test_cells


def test_split_errors():
    with pytest.raises(ValidationError):
        split_cells(["a"], "fixed")
    with pytest.raises(ProvenanceError):
        SplitPlan(("a", "b"), ("b",), 0, "fixed")


def test_plan_round_trip():
    p = split_cells(["a", "b", "c"], "loocv", seed=4)[1]
    assert SplitPlan.from_dict(p.to_dict()) == p


def test_normalizer_examples():
    t = FeatureTable(["a", "a"], [1, 2], np.array([[0.0] * 13, [10.0] * 13]), [0.8, 1.0], ["train", "train"])
    t.hi[:, 1] = 4.0  # constant column
    norm = fit_normalizer(t)
    x = np.full(13, 5.0)
    x[2] = 12.0
    out = norm.transform_features(x)
    assert out[0] == 0.0
    assert out[2] == pytest.approx(1.4)
    assert out[1] == 0.0
    assert np.array_equal(norm.transform_features(t.hi)[:, 0], [-1.0, 1.0])
    assert np.array_equal(norm.transform_target([0.8, 1.0]), [0.0, 1.0])
    assert np.allclose(norm.inverse_target(norm.transform_target([0.85, 0.9])), [0.85, 0.9], atol=1e-15)


def test_normalizer_bounds_map_to_unit_interval():
    t = make_table([30, 20]).tagged("train")
    out = apply_normalizer(fit_normalizer(t), t)
    assert np.array_equal(out.hi.min(axis=0), -np.ones(13))
    assert np.array_equal(out.hi.max(axis=0), np.ones(13))


def test_normalizer_before_fit():
    with pytest.raises(StateError):
        Normalizer().transform_features(np.zeros(13))
    with pytest.raises(StateError):
        Normalizer().inverse_target([0.5])


def test_normalizer_rejects_test_rows():
    t = make_table([10, 10]).tagged("train")
    t.partition[3] = "test"
    with pytest.raises(ProvenanceError):
        fit_normalizer(t)


def test_normalizer_round_trip():
    t = make_table([12]).tagged("train")
    n = fit_normalizer(t)
    m = Normalizer.from_dict(n.to_dict())
    assert np.array_equal(m.transform_features(t.hi), n.transform_features(t.hi))


def test_window_examples():
    ds = make_windows(make_table([5]), 3)
    assert len(ds) == 3 and list(ds.cycle_index) == [3, 4, 5]
    assert len(make_windows(make_table([2]), 3)) == 0
    two = make_windows(make_table([5, 5]), 3)
    assert len(two) == 6
    assert list(two.cell_id) == ["C0"] * 3 + ["C1"] * 3


def test_window_contents_and_target():
    t = make_table([6])
    ds = make_windows(t, 4, features=[2, 5])
    assert ds.x.shape == (3, 4, 2)
    assert np.array_equal(ds.x[1], t.hi[1:5][:, [2, 5]])
    assert ds.y[1] == t.soh[4]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=4), st.integers(1, 6))
def test_window_count_formula(lengths, k):
    ds = make_windows(make_table(lengths), k)
    assert len(ds) == sum(max(0, n - k + 1) for n in lengths)


def test_windows_ordered_by_cycle():
    t = make_table([6])
    perm = np.array([3, 0, 5, 1, 4, 2])
    shuffled = t.subset(perm)
    a, b = make_windows(t, 3), make_windows(shuffled, 3)
    assert np.array_equal(a.x, b.x)


def test_partition_and_disjoint_windows():
    t = make_table([8, 8, 8, 8])
    plan = split_cells(t.cells, "fixed", seed=1, train_fraction=0.5)[0]
    train, test = partition_table(t, plan)
    assert set(train.partition) == {"train"} and set(test.partition) == {"test"}
    a, b = make_windows(train, 3), make_windows(test, 3)
    assert_disjoint(a, b)
    with pytest.raises(ProvenanceError):
        assert_disjoint(a, a)
