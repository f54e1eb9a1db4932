import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afaeval import oracle
from afaeval.core import ObservedDataset
from afaeval.estimators import (
    RAW,
    SELF_NORMALIZED,
    bootstrap_ci,
    compute_weight_series,
    estimate_blocking,
    estimate_dm_semi,
    estimate_drl_semi,
    estimate_ground_truth,
    estimate_ipw_semi,
    estimate_ipw_semi_miss,
    positivity_diagnostics,
)
from afaeval.nuisance import (
    PropensityModel,
    ZeroQ,
    _Factor,
    ground_truth_propensity,
)
from afaeval.simulate import rollout_semi_offline


@pytest.fixture(scope="module")
def env():
    schema = oracle.tiny_schema()
    policy = oracle.tiny_policy(0.5)
    classifier = oracle.RuleClassifier(schema)
    costs = oracle.tiny_costs()
    _, data = oracle.sample_dataset(8_000, seed=0)
    trajs = rollout_semi_offline(data, policy, classifier, costs, 1, 1)
    prop = ground_truth_propensity(oracle.tiny_mechanism())
    weights = compute_weight_series(trajs, prop, data)
    return schema, policy, classifier, costs, data, trajs, prop, weights


class TestBootstrap:
    def test_constant_gives_zero_width(self):
        data = np.full(50, 3.0)
        lo, hi = bootstrap_ci(lambda idx: float(data[idx].mean()), 50, B=100, seed=0)
        assert lo == hi == 3.0

    def test_same_seed_identical(self):
        data = np.random.default_rng(1).normal(size=100)
        f = lambda idx: float(data[idx].mean())  # noqa: E731
        assert bootstrap_ci(f, 100, 50, seed=9) == bootstrap_ci(f, 100, 50, seed=9)

    def test_b_too_small(self):
        with pytest.raises(ValueError):
            bootstrap_ci(lambda idx: 0.0, 10, B=1)

    def test_coverage_on_normal_mean(self):
        # level-0.95 percentile bootstrap on the mean of 100 normals
        rng = np.random.default_rng(0)
        covered = 0
        reps = 200
        for r in range(reps):
            data = rng.normal(loc=1.0, size=100)
            lo, hi = bootstrap_ci(
                lambda idx: float(data[idx].mean()), 100, B=200, seed=r
            )
            covered += lo <= 1.0 <= hi
        assert 0.90 <= covered / reps <= 0.98


class TestWeightSeries:
    def test_mean_raw_weight_near_one(self, env):
        *_, weights = env
        assert abs(weights.total_final.mean() - 1.0) < 0.05

    def test_telescoping_consistency(self, env):
        # rho^T equals the product form computed from scratch
        schema, policy, classifier, costs, data, trajs, prop, weights = env
        probs = prop.per_superfeature_probs(data.features, data.mask)
        for i in np.random.default_rng(2).integers(0, len(trajs), 50):
            t = trajs[i]
            ratio = np.prod([s.p_alpha / s.p_sim for s in t.steps])
            denom = 1.0
            for s in t.steps:
                if s.action != -1 and s.action in prop.factors:
                    denom *= probs[t.row_index, s.action]
            assert weights.final[i] == pytest.approx(ratio / denom, rel=1e-12)

    def test_adjustment_row_unobserved_is_zero_weight(self, env):
        schema, policy, classifier, costs, data, trajs, prop, _ = env
        adj_prop = PropensityModel(prop.factors, schema, prop.source, frozenset({1}))
        w = compute_weight_series(trajs, adj_prop, data)
        rows = np.array([t.row_index for t in trajs])
        unobserved = data.mask[rows, 1] == 0
        assert (w.total_final[unobserved] == 0).all()
        assert (w.total_final[~unobserved] > 0).all()

    def test_floor_counts_tiny_propensities(self, env):
        schema, policy, classifier, costs, data, trajs, *_ = env
        tiny = PropensityModel(
            {1: _Factor("constant", 1e-9, (), (), frozenset())},
            schema,
            "GROUND_TRUTH",
        )
        w = compute_weight_series(trajs, tiny, data)
        acquired1 = [any(s.action == 1 for s in t.steps) for t in trajs]
        assert w.floored >= sum(acquired1)

    def test_propensity_one_diagnostics(self, env):
        schema, policy, classifier, costs, data, trajs, *_ = env
        ones = PropensityModel({}, schema, "GROUND_TRUTH")
        w = compute_weight_series(trajs, ones, data)
        diag = positivity_diagnostics(trajs, w)
        assert diag["min_propensity"] == 1.0
        assert diag["floored"] == 0.0


class TestReductionIdentities:
    def test_zero_q_drl_equals_ipw(self, env):
        schema, policy, classifier, costs, data, trajs, prop, weights = env
        for norm in (RAW, SELF_NORMALIZED):
            ipw = estimate_ipw_semi(trajs, weights, "J_mc", norm, data.n).point()
            drl = estimate_drl_semi(
                trajs, weights, ZeroQ(schema), policy, data, "J_mc", norm, data.n
            ).point()
            assert drl == pytest.approx(ipw, abs=1e-12)

    def test_trivial_adjustment_equals_ipw(self, env):
        schema, policy, classifier, costs, data, trajs, prop, weights = env
        triv = PropensityModel(prop.factors, schema, prop.source, frozenset({0}))
        w2 = compute_weight_series(trajs, triv, data)
        a = estimate_ipw_semi(trajs, weights, "J_mc", SELF_NORMALIZED, data.n).point()
        b = estimate_ipw_semi_miss(trajs, w2, "J_mc", SELF_NORMALIZED, data.n).point()
        assert a == pytest.approx(b, abs=1e-12)

    def test_wrong_estimator_for_weights_rejected(self, env):
        schema, policy, classifier, costs, data, trajs, prop, weights = env
        with pytest.raises(ValueError):
            estimate_ipw_semi_miss(trajs, weights, "J_mc")
        adj = PropensityModel(prop.factors, schema, prop.source, frozenset({1}))
        w2 = compute_weight_series(trajs, adj, data)
        with pytest.raises(ValueError):
            estimate_ipw_semi(trajs, w2, "J_mc")


class TestOrderingInvariance:
    def test_trajectory_order_does_not_matter(self, env):
        schema, policy, classifier, costs, data, trajs, prop, weights = env
        order = np.random.default_rng(3).permutation(len(trajs))
        trajs2 = [trajs[i] for i in order]
        w2 = compute_weight_series(trajs2, prop, data)
        a = estimate_ipw_semi(trajs, weights, "J_mc", SELF_NORMALIZED, data.n).point()
        b = estimate_ipw_semi(trajs2, w2, "J_mc", SELF_NORMALIZED, data.n).point()
        assert a == pytest.approx(b, abs=1e-12)


class TestTargets:
    def test_j_total_is_sum_of_parts_for_means(self, env):
        schema, policy, classifier, costs, data, trajs, prop, weights = env
        j_a = estimate_blocking(trajs, "J_a", data.n).point()
        j_mc = estimate_blocking(trajs, "J_mc", data.n).point()
        j_tot = estimate_blocking(trajs, "J_total", data.n).point()
        assert j_tot == pytest.approx(j_a + j_mc, abs=1e-12)

    def test_ipw_j_total_consistent(self, env):
        schema, policy, classifier, costs, data, trajs, prop, weights = env
        exact = oracle.exact_value(policy, classifier, costs, "J_total")
        pt = estimate_ipw_semi(trajs, weights, "J_total", SELF_NORMALIZED, data.n).point()
        assert abs(pt - exact) / exact < 0.05

    def test_ipw_j_a_consistent(self, env):
        schema, policy, classifier, costs, data, trajs, prop, weights = env
        exact = oracle.exact_value(policy, classifier, costs, "J_a")
        pt = estimate_ipw_semi(trajs, weights, "J_a", SELF_NORMALIZED, data.n).point()
        assert abs(pt - exact) / exact < 0.05

    def test_drl_j_total_consistent(self, env):
        schema, policy, classifier, costs, data, trajs, prop, weights = env
        exact = oracle.exact_value(policy, classifier, costs, "J_total")
        q = oracle.exact_q(policy, classifier, costs, "J_total")
        pt = estimate_drl_semi(
            trajs, weights, q, policy, data, "J_total", SELF_NORMALIZED, data.n
        ).point()
        assert abs(pt - exact) / exact < 0.05

    def test_dm_j_total_exact_on_population(self):
        policy = oracle.tiny_policy(0.5)
        classifier = oracle.RuleClassifier(oracle.tiny_schema())
        costs = oracle.tiny_costs()
        exact = oracle.exact_value(policy, classifier, costs, "J_total")
        q = oracle.exact_q(policy, classifier, costs, "J_total")
        pop, pop_w = oracle.population_dataset()
        pt = estimate_dm_semi(q, pop, policy, "J_total", row_weights=pop_w).point()
        assert pt == pytest.approx(exact, abs=1e-10)


class TestReports:
    def test_report_fields(self, env):
        schema, policy, classifier, costs, data, trajs, prop, weights = env
        rep = estimate_ipw_semi(trajs, weights, "J_mc", SELF_NORMALIZED, data.n).report(
            B=50, seed=4
        )
        assert rep.ci_low <= rep.point <= rep.ci_high
        assert rep.diagnostics["ess"] > 0
        d = rep.to_dict()
        assert d["estimator"] == "ipw-semi"

    def test_ground_truth_needs_trajectories(self):
        with pytest.raises(ValueError):
            estimate_ground_truth([], "J_mc")
