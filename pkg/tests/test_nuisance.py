import numpy as np
import pytest

from afaeval.core import CostSpec, ObservedDataset
from afaeval.datagen import MissingnessMechanism, apply_missingness, generate_synthetic
from afaeval.nuisance import (
    PROPENSITY_FLOOR,
    ConstantQ,
    PropensityInevaluableError,
    TabularQ,
    ZeroQ,
    fit_propensity_mar,
    fit_propensity_mnar_pattern,
    fit_q_semi,
    ground_truth_propensity,
    zeroed_propensity,
)
from afaeval.policy import MajorityClassifier, StopPolicy, SubsetRandomPolicy
from afaeval.simulate import rollout_semi_offline
from afaeval import oracle
from tests.test_datagen import mar_mechanism, schema3


class TestPropensityMar:
    def test_fit_recovers_mechanism(self):
        full = generate_synthetic(60_000, 4, np.eye(4), seed=0)
        obs = apply_missingness(full, mar_mechanism(), seed=1)
        model = fit_propensity_mar(obs, conditioning=[0])
        truth = ground_truth_propensity(mar_mechanism())
        p_hat = model.per_superfeature_probs(obs.features, obs.mask)
        p_true = truth.per_superfeature_probs(obs.features, obs.mask)
        assert np.nanmax(np.abs(p_hat - p_true)) < 0.02

    def test_missable_conditioning_rejected(self):
        full = generate_synthetic(200, 4, np.eye(4), seed=0)
        obs = apply_missingness(full, mar_mechanism(), seed=1)
        with pytest.raises(ValueError):
            fit_propensity_mar(obs, conditioning=[1])

    def test_prob_superset_and_inevaluable(self):
        truth = ground_truth_propensity(mar_mechanism())
        vals = np.array([0.5, np.nan, np.nan, np.nan])
        r_prime = np.array([1, 0, 0])
        assert truth.prob_superset(r_prime, vals) == 1.0
        p = truth.prob_superset(np.array([1, 1, 0]), vals)
        assert 0 < p < 1
        mnar_truth = ground_truth_propensity(
            MissingnessMechanism.from_dict(
                [
                    {"kind": "always"},
                    {"kind": "constant", "p": 0.7},
                    {"kind": "logistic", "intercept": -1.5, "coefficients": {"1": 1.0}},
                ],
                schema3(),
            )
        )
        with pytest.raises(PropensityInevaluableError):
            mnar_truth.prob_superset(np.array([1, 1, 1]), vals)

    def test_zeroed_propensity_is_half(self):
        truth = ground_truth_propensity(mar_mechanism())
        z = zeroed_propensity(truth)
        probs = z.per_superfeature_probs(np.zeros((3, 4)))
        assert np.allclose(probs[:, 1:], 0.5)


class TestPropensityMnar:
    def test_pattern_fit(self):
        schema = schema3()
        mech = MissingnessMechanism.from_dict(
            [
                {"kind": "always"},
                {"kind": "constant", "p": 0.7},
                {"kind": "logistic", "intercept": -1.5, "coefficients": {"1": 1.0}},
            ],
            schema,
        )
        cov = np.diag([1.0, 6.575870750880607, 1.0, 1.0])
        full = generate_synthetic(80_000, 4, cov, seed=2)
        obs = apply_missingness(full, mech, seed=3)
        model = fit_propensity_mnar_pattern(obs, adjustment=[1])
        assert model.adjustment == frozenset({1})
        # the adjustment factor approximates the marginal observation rate
        probs = model.per_superfeature_probs(obs.features, obs.mask)
        assert abs(np.nanmean(probs[:, 1]) - 0.7) < 0.02
        # the non-adjustment factor is inevaluable where X1 is unobserved
        missing1 = obs.mask[:, 1] == 0
        assert np.isnan(probs[missing1, 2]).all()
        # and close to the true logistic where X1 is observed
        truth = ground_truth_propensity(mech)
        p_true = truth.per_superfeature_probs(obs.features, obs.mask)
        seen = ~missing1
        assert np.nanmax(np.abs(probs[seen, 2] - p_true[seen, 2])) < 0.03


class TestQModels:
    def test_constant_and_zero(self):
        schema = schema3()
        z = ZeroQ(schema)
        c = ConstantQ(schema, 3.0)
        vals = np.zeros((2, 4))
        acq = np.ones((2, 3), dtype=bool)
        acts = np.array([1, -1])
        assert z.q_batch(vals, acq, acts).tolist() == [0.0, 0.0]
        assert c.q_batch(vals, acq, acts).tolist() == [3.0, 3.0]

    def test_v_is_policy_average(self):
        schema = schema3()
        c = ConstantQ(schema, 3.0)
        pol = SubsetRandomPolicy(0.5, schema)
        v = c.v_batch(np.zeros((4, 4)), np.tile([True, False, False], (4, 1)), pol)
        assert np.allclose(v, 3.0)

    def test_tabular_key_distinguishes_missing_from_zero(self):
        schema = schema3()
        vals_missing = np.array([1.0, np.nan, 0.0, 0.0])
        vals_zero = np.array([1.0, 0.0, 0.0, 0.0])
        k1 = TabularQ.key(vals_missing, np.array([True, False, True]), 1)
        k2 = TabularQ.key(vals_zero, np.array([True, True, True]), 1)
        assert k1 != k2


class TestFitQSemi:
    def test_exact_on_oracle_population(self):
        policy = oracle.tiny_policy(0.5)
        classifier = oracle.RuleClassifier(oracle.tiny_schema())
        costs = oracle.tiny_costs()
        dp = oracle.exact_q(policy, classifier, costs, "J_mc")
        pop, pop_w = oracle.population_dataset()
        trajs, traj_w = oracle.enumerate_semi_offline(pop, policy, classifier, costs, pop_w)
        fit = fit_q_semi(trajs, policy, pop, target="J_mc", regressor="tabular", weights=traj_w)
        err = max(abs(fit.table.get(k, np.nan) - v) for k, v in dp.table.items())
        assert err < 1e-6

    def test_j_total_includes_acquisition_costs(self):
        policy = oracle.tiny_policy(0.5)
        classifier = oracle.RuleClassifier(oracle.tiny_schema())
        costs = oracle.tiny_costs()
        pop, pop_w = oracle.population_dataset()
        trajs, traj_w = oracle.enumerate_semi_offline(pop, policy, classifier, costs, pop_w)
        dp_total = oracle.exact_q(policy, classifier, costs, "J_total")
        fit = fit_q_semi(trajs, policy, pop, target="J_total", regressor="tabular", weights=traj_w)
        err = max(abs(fit.table.get(k, np.nan) - v) for k, v in dp_total.table.items())
        assert err < 1e-6

    def test_stop_always_value(self):
        # under a STOP-always policy V^0 is the mean misclassification cost
        full = generate_synthetic(20_000, 4, np.eye(4), seed=5)
        obs = apply_missingness(full, mar_mechanism(), seed=6)
        costs = CostSpec.from_schema(schema3(), 14.0)
        clf = MajorityClassifier(1)
        pol = StopPolicy(schema3())
        trajs = rollout_semi_offline(obs, pol, clf, costs, 1, 7)
        q = fit_q_semi(trajs, pol, obs, target="J_mc", regressor="ridge")
        from afaeval.estimators import estimate_dm_semi

        v0 = estimate_dm_semi(q, obs, pol, "J_mc").point()
        assert v0 == pytest.approx(4.9, abs=0.25)

    def test_empty_trajectories_rejected(self):
        pop, _ = oracle.population_dataset()
        with pytest.raises(ValueError):
            fit_q_semi([], oracle.tiny_policy(0.5), pop)

    def test_unknown_target_rejected(self):
        policy = oracle.tiny_policy(0.5)
        classifier = oracle.RuleClassifier(oracle.tiny_schema())
        costs = oracle.tiny_costs()
        pop, pop_w = oracle.population_dataset()
        trajs, _ = oracle.enumerate_semi_offline(pop, policy, classifier, costs, pop_w)
        with pytest.raises(ValueError):
            fit_q_semi(trajs, policy, pop, target="J_bogus")
