import numpy as np
import pytest
from hypothesis import given, strategies as st

from afaeval.core import (
    CostSpec,
    EstimateReport,
    FullDataset,
    ObservedDataset,
    SchemaError,
    Superfeature,
    SuperfeatureSchema,
    count_trajectories,
    initial_state,
    masked_features,
)


def make_schema():
    return SuperfeatureSchema(
        (
            Superfeature("a", (0,), 0.0),
            Superfeature("b", (1, 2), 1.0),
            Superfeature("c", (3,), 2.0),
        )
    )


class TestSchema:
    def test_partition_required(self):
        with pytest.raises(SchemaError):
            SuperfeatureSchema(
                (Superfeature("a", (0,), 0.0), Superfeature("b", (0,), 1.0))
            )
        with pytest.raises(SchemaError):
            SuperfeatureSchema(
                (Superfeature("a", (0,), 0.0), Superfeature("b", (2,), 1.0))
            )

    def test_free_and_costly(self):
        s = make_schema()
        assert s.free_set == frozenset({0})
        assert s.costly == (1, 2)
        assert s.d_super == 3
        assert s.d_raw == 4

    def test_column_owner(self):
        s = make_schema()
        assert list(s.column_owner()) == [0, 1, 1, 2]

    def test_round_trip(self):
        s = make_schema()
        assert SuperfeatureSchema.from_dict(s.to_dict()) == s

    def test_negative_cost_rejected(self):
        with pytest.raises(SchemaError):
            Superfeature("a", (0,), -1.0)


class TestCostSpec:
    def test_from_schema(self):
        c = CostSpec.from_schema(make_schema(), 14.0)
        assert c.c_acq == (0.0, 1.0, 2.0)
        c.validate_against(make_schema())

    def test_nonpositive_mc_rejected(self):
        with pytest.raises(SchemaError):
            CostSpec((0.0, 1.0), 0.0)

    def test_free_set_mismatch(self):
        with pytest.raises(SchemaError):
            CostSpec((1.0, 1.0, 2.0), 5.0).validate_against(make_schema())


class TestDatasets:
    def test_full_rejects_nan(self):
        with pytest.raises(SchemaError):
            FullDataset(np.array([[1.0, np.nan]]), np.array([0]))

    def test_observed_mask_consistency(self):
        s = make_schema()
        feats = np.array([[0.5, np.nan, np.nan, 2.0]])
        mask = np.array([[1, 0, 1]])
        data = ObservedDataset(feats, mask, np.array([1]), s)
        assert not data.complete[0]

        # observed superfeature with NaN inside is rejected
        with pytest.raises(SchemaError):
            ObservedDataset(feats, np.array([[1, 1, 1]]), np.array([1]), s)
        # missing superfeature with a value is rejected
        with pytest.raises(SchemaError):
            ObservedDataset(
                np.array([[0.5, 1.0, 1.0, 2.0]]), mask, np.array([1]), s
            )

    def test_free_must_be_observed(self):
        s = make_schema()
        with pytest.raises(SchemaError):
            ObservedDataset(
                np.array([[np.nan, 1.0, 1.0, 2.0]]),
                np.array([[0, 1, 1]]),
                np.array([1]),
                s,
            )

    def test_masked_features_partial_groups(self):
        s = make_schema()
        full = FullDataset(np.arange(8, dtype=float).reshape(2, 4), np.array([0, 1]))
        mask = np.array([[1, 0, 1], [1, 1, 0]])
        feats = masked_features(full, mask, s)
        assert np.isnan(feats[0, 1]) and np.isnan(feats[0, 2])
        assert feats[0, 3] == 3.0
        assert np.isnan(feats[1, 3])


class TestInitialState:
    def test_free_revealed_only(self):
        s = make_schema()
        st0 = initial_state(np.array([1.0, 2.0, 3.0, 4.0]), s)
        assert st0.acquired.tolist() == [True, False, False]
        assert st0.values[0] == 1.0
        assert np.isnan(st0.values[1:]).all()


class TestEstimateReport:
    def test_point_must_lie_in_ci(self):
        with pytest.raises(ValueError):
            EstimateReport("x", "J_mc", 2.0, 2.5, 3.0, 1, 1)


def _count_by_enumeration(m: int) -> int:
    """Ordered subsets of {1..m} of every size (acquisition order matters)."""
    import itertools

    total = 0
    for k in range(m + 1):
        total += len(list(itertools.permutations(range(m), k)))
    return total


class TestCountTrajectories:
    def test_small_values(self):
        assert count_trajectories(0) == 1
        assert count_trajectories(1) == 2
        assert count_trajectories(2) == 5

    def test_ten_features(self):
        assert count_trajectories(10) == 9_864_101

    @given(st.integers(min_value=0, max_value=6))
    def test_matches_enumeration(self, m):
        assert count_trajectories(m) == _count_by_enumeration(m)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            count_trajectories(-1)

    def test_huge_guard(self):
        with pytest.raises(OverflowError):
            count_trajectories(10_001)
