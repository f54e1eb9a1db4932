"""Nuisance models: observation propensities and the cost-to-go function.

Propensities factor as a product of per-superfeature observation
probabilities given their conditioning columns; the factorization is exact
for every shipped mechanism (mask bits are conditionally independent given
the conditioners). A joint-model slot can be added behind the same interface
for other patterns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import warnings

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.neural_network import MLPRegressor

from .core import (
    STOP,
    AcquisitionState,
    CostSpec,
    ObservedDataset,
    SuperfeatureSchema,
    Trajectory,
    initial_state,
)
from .datagen import AlwaysObserved, ConstantRate, LogisticRate, MissingnessMechanism
from .policy import Policy

PROPENSITY_FLOOR = 1e-6


class PropensityInevaluableError(ValueError):
    """The model's conditioning features are unobserved on this row."""


@dataclass(frozen=True)
class _Factor:
    """P(R_j = 1 | conditioning columns) for one superfeature."""

    kind: str  # "constant" | "logistic"
    intercept: float
    columns: tuple[int, ...]
    coefs: tuple[float, ...]
    conditioning_superfeatures: frozenset[int]  # must be observed to evaluate

    def prob(self, features: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.full(features.shape[0], self.intercept)
        z = np.full(features.shape[0], self.intercept, dtype=float)
        for c, w in zip(self.columns, self.coefs):
            z += w * features[:, c]
        return 1.0 / (1.0 + np.exp(-z))


class PropensityModel:
    """Evaluates P(R >= r' | conditioning) and P(R = all-ones | conditioning).

    factors: one per superfeature that can be missing; absent superfeatures
    are treated as always observed (probability 1).
    """

    def __init__(
        self,
        factors: Mapping[int, _Factor],
        schema: SuperfeatureSchema,
        source: str,
        adjustment: frozenset[int] = frozenset(),
    ):
        self.factors = dict(factors)
        self.schema = schema
        self.source = source  # "LEARNED" | "GROUND_TRUTH"
        self.adjustment = frozenset(adjustment)

    def per_superfeature_probs(
        self, features: np.ndarray, mask: np.ndarray | None = None
    ) -> np.ndarray:
        """(n, d_super) matrix of P(R_j=1 | row conditioning); NaN where the
        factor's conditioners are unobserved."""
        n = features.shape[0]
        out = np.ones((n, self.schema.d_super))
        for j, factor in self.factors.items():
            evaluable = np.ones(n, dtype=bool)
            if factor.conditioning_superfeatures and mask is not None:
                for s in factor.conditioning_superfeatures:
                    if s not in self.schema.free_set:
                        evaluable &= mask[:, s].astype(bool)
            vals = np.where(np.isnan(features), 0.0, features)
            probs = factor.prob(vals)
            out[:, j] = np.where(evaluable, probs, np.nan)
        return out

    def prob_superset(self, r_prime: np.ndarray, conditioning_values: np.ndarray) -> float:
        """P(R >= r') given one row's feature values (NaN = unobserved)."""
        values = np.asarray(conditioning_values, dtype=float)[None, :]
        r_prime = np.asarray(r_prime).astype(bool)
        result = 1.0
        for j, factor in self.factors.items():
            if not r_prime[j]:
                continue
            for c in factor.columns:
                if np.isnan(values[0, c]):
                    raise PropensityInevaluableError(
                        f"factor for superfeature {j} conditions on unobserved column {c}"
                    )
            result *= float(factor.prob(values)[0])
        return result

    def prob_complete(self, conditioning_values: np.ndarray) -> float:
        return self.prob_superset(np.ones(self.schema.d_super, dtype=bool), conditioning_values)


def fit_propensity_mar(
    data: ObservedDataset, conditioning: Sequence[int]
) -> PropensityModel:
    """One logistic model per non-always-observed superfeature, conditioned on
    the raw columns of the given always-observed superfeatures."""
    schema = data.schema
    conditioning = sorted(set(int(j) for j in conditioning))
    for j in conditioning:
        if not np.all(data.mask[:, j] == 1):
            raise ValueError(f"conditioning superfeature {j} has missing entries")
    cond_cols = tuple(c for j in conditioning for c in schema.columns_of(j))

    factors: dict[int, _Factor] = {}
    X = data.features[:, list(cond_cols)]
    for j in range(schema.d_super):
        col = data.mask[:, j]
        if col.all():
            continue
        model = LogisticRegression(penalty=None, max_iter=1000)
        model.fit(X, col)
        factors[j] = _Factor(
            "logistic",
            float(model.intercept_[0]),
            cond_cols,
            tuple(float(w) for w in model.coef_[0]),
            frozenset(conditioning),
        )
    return PropensityModel(factors, schema, "LEARNED")


def ground_truth_propensity(mech: MissingnessMechanism) -> PropensityModel:
    """Exact propensity from the known mechanism rules."""
    schema = mech.schema
    owner = schema.column_owner()
    factors: dict[int, _Factor] = {}
    for j, rule in enumerate(mech.rules):
        if isinstance(rule, AlwaysObserved):
            continue
        if isinstance(rule, ConstantRate):
            factors[j] = _Factor("constant", rule.p, (), (), frozenset())
        elif isinstance(rule, LogisticRate):
            cols = tuple(sorted(rule.coefficients))
            factors[j] = _Factor(
                "logistic",
                rule.intercept,
                cols,
                tuple(rule.coefficients[c] for c in cols),
                frozenset(int(owner[c]) for c in cols),
            )
    return PropensityModel(factors, schema, "GROUND_TRUTH")


def fit_propensity_mnar_pattern(
    data: ObservedDataset, adjustment: Sequence[int]
) -> PropensityModel:
    """Pattern-factorized propensity for mechanisms where missable
    superfeatures condition only on always-observed columns or on the
    adjustment set.

    Adjustment factors are fit on all rows against the always-observed
    columns; remaining factors are fit on the subpopulation with the
    adjustment observed, conditioning on always-observed plus adjustment
    columns. Evaluation is only defined where the row's adjustment features
    are observed.
    """
    schema = data.schema
    adjustment = frozenset(int(j) for j in adjustment)
    always = [
        j for j in range(schema.d_super) if bool(np.all(data.mask[:, j] == 1))
    ]
    always_cols = tuple(c for j in always for c in schema.columns_of(j))
    adj_cols = tuple(c for j in sorted(adjustment) for c in schema.columns_of(j))
    adj_observed = data.mask[:, sorted(adjustment)].astype(bool).all(axis=1)

    factors: dict[int, _Factor] = {}
    for j in range(schema.d_super):
        col = data.mask[:, j]
        if col.all():
            continue
        if j in adjustment:
            X = data.features[:, list(always_cols)]
            model = LogisticRegression(penalty=None, max_iter=1000)
            model.fit(X, col)
            factors[j] = _Factor(
                "logistic",
                float(model.intercept_[0]),
                always_cols,
                tuple(float(w) for w in model.coef_[0]),
                frozenset(always),
            )
        else:
            cols = always_cols + adj_cols
            X = data.features[np.ix_(adj_observed, list(cols))]
            model = LogisticRegression(penalty=None, max_iter=1000)
            model.fit(X, col[adj_observed])
            factors[j] = _Factor(
                "logistic",
                float(model.intercept_[0]),
                cols,
                tuple(float(w) for w in model.coef_[0]),
                frozenset(always) | adjustment,
            )
    return PropensityModel(factors, schema, "LEARNED", adjustment)


def zeroed_propensity(model: PropensityModel) -> PropensityModel:
    """Copy with all factor coefficients and intercepts zeroed (each factor
    becomes a constant 0.5); used for misspecification checks."""
    factors = {
        j: _Factor("logistic", 0.0, f.columns, tuple(0.0 for _ in f.coefs), f.conditioning_superfeatures)
        for j, f in model.factors.items()
    }
    return PropensityModel(factors, model.schema, model.source, model.adjustment)


# ---------------------------------------------------------------------------
# Cost-to-go model
# ---------------------------------------------------------------------------


class QModel:
    """Expected remaining cost of taking `pending_action` in a state."""

    schema: SuperfeatureSchema

    def q_batch(self, values: np.ndarray, acquired: np.ndarray, actions: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def q(self, state: AcquisitionState, pending_action: int, x_o: np.ndarray | None = None) -> float:
        return float(
            self.q_batch(
                state.values[None, :], state.acquired[None, :], np.array([pending_action])
            )[0]
        )

    def v_batch(self, values: np.ndarray, acquired: np.ndarray, policy: Policy) -> np.ndarray:
        """Policy-averaged value: sum_a pi(a | state) q(state, a)."""
        n = values.shape[0]
        d = self.schema.d_super
        pi = policy.probabilities_batch(acquired, values)
        out = np.zeros(n)
        for a in list(range(d)) + [STOP]:
            col = d if a == STOP else a
            active = pi[:, col] > 0
            if active.any():
                q = self.q_batch(values[active], acquired[active], np.full(active.sum(), a))
                out[active] += pi[active, col] * q
        return out

    def v(self, state: AcquisitionState, policy: Policy) -> float:
        return float(self.v_batch(state.values[None, :], state.acquired[None, :], policy)[0])


class ZeroQ(QModel):
    def __init__(self, schema: SuperfeatureSchema):
        self.schema = schema

    def q_batch(self, values, acquired, actions) -> np.ndarray:
        return np.zeros(values.shape[0])


class ConstantQ(QModel):
    def __init__(self, schema: SuperfeatureSchema, value: float):
        self.schema = schema
        self.value = float(value)

    def q_batch(self, values, acquired, actions) -> np.ndarray:
        return np.full(values.shape[0], self.value)


class _RegressionQ(QModel):
    def __init__(self, model, means: np.ndarray, schema: SuperfeatureSchema):
        self.model = model
        self.means = means
        self.schema = schema

    def _encode(self, values: np.ndarray, acquired: np.ndarray, actions: np.ndarray) -> np.ndarray:
        d = self.schema.d_super
        imputed = np.where(np.isnan(values), self.means[None, :], values)
        onehot = np.zeros((len(actions), d + 1))
        cols = np.where(actions == STOP, d, actions)
        onehot[np.arange(len(actions)), cols] = 1.0
        return np.column_stack([imputed, acquired.astype(float), onehot])

    def q_batch(self, values, acquired, actions) -> np.ndarray:
        return self.model.predict(self._encode(values, acquired, actions))


class TabularQ(QModel):
    """Exact-cell model for discrete environments; keys on the acquired set,
    the observed values, and the action."""

    def __init__(self, table: dict, schema: SuperfeatureSchema, default: float = 0.0):
        self.table = table
        self.schema = schema
        self.default = default

    @staticmethod
    def key(values: np.ndarray, acquired: np.ndarray, action: int) -> tuple:
        obs = tuple(
            round(float(v), 9) for v in np.where(np.isnan(values), 0.0, values)
        )
        return (tuple(bool(b) for b in acquired), obs, int(action))

    def q_batch(self, values, acquired, actions) -> np.ndarray:
        n = values.shape[0]
        if n == 0:
            return np.empty(0)
        # look up each distinct (acquired, values, action) cell once
        enc = np.column_stack(
            [
                np.asarray(acquired, dtype=float),
                np.where(np.isnan(values), 0.0, values),
                np.asarray(actions, dtype=float),
            ]
        )
        uniq, inverse = np.unique(enc, axis=0, return_inverse=True)
        d = acquired.shape[1]
        per_cell = np.empty(len(uniq))
        for i, row in enumerate(uniq):
            per_cell[i] = self.table.get(
                self.key(row[d:-1], row[:d].astype(bool), int(row[-1])), self.default
            )
        return per_cell[inverse.reshape(-1)]


def _reconstruct_transitions(
    trajectories: Sequence[Trajectory], data: ObservedDataset
):
    """Flatten trajectories into (state, action, cost, next-state) records."""
    schema = data.schema
    d_super, d_raw = schema.d_super, schema.d_raw

    lengths = np.array([len(t.steps) for t in trajectories], dtype=np.intp)
    n_flat = int(lengths.sum())
    if n_flat == 0:
        empty = np.empty(0)
        return (
            np.empty((0, d_raw)),
            np.empty((0, d_super), dtype=bool),
            np.empty(0, dtype=int),
            empty,
            empty,
            np.empty(0, dtype=bool),
            np.empty((0, d_raw)),
            np.empty((0, d_super), dtype=bool),
        )

    row_idx = np.repeat(
        np.fromiter((t.row_index for t in trajectories), dtype=np.intp, count=len(trajectories)),
        lengths,
    )
    acts = np.fromiter(
        (s.action for t in trajectories for s in t.steps), dtype=int, count=n_flat
    )
    acq_costs = np.fromiter(
        (0.0 if s.action == STOP else s.acquisition_cost for t in trajectories for s in t.steps),
        dtype=float,
        count=n_flat,
    )
    terminal = acts == STOP
    mc_costs = np.where(
        terminal, np.repeat([t.mc_cost for t in trajectories], lengths), 0.0
    )

    # acquired sets before/after each step: free superfeatures plus a segmented
    # exclusive cumulative union of the non-STOP actions within each trajectory
    onehot = np.zeros((n_flat, d_super), dtype=np.int64)
    nonstop = ~terminal
    onehot[np.nonzero(nonstop)[0], acts[nonstop]] = 1
    cum = np.cumsum(onehot, axis=0)
    exclusive = cum - onehot
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    traj_of = np.repeat(np.arange(len(trajectories)), lengths)
    exclusive = exclusive - exclusive[starts][traj_of]
    free = np.zeros(d_super, dtype=bool)
    for j in schema.free_set:
        free[j] = True
    s_acq = (exclusive > 0) | free
    n_acq = s_acq | onehot.astype(bool)

    # raw-column visibility follows the acquired superfeature set
    expand = np.zeros((d_super, d_raw), dtype=bool)
    for j in range(d_super):
        for c in schema.columns_of(j):
            expand[j, c] = True
    feats = data.features[row_idx]
    s_vals = np.where(s_acq @ expand, feats, np.nan)
    n_vals = np.where(n_acq @ expand, feats, np.nan)

    return (s_vals, s_acq, acts, acq_costs, mc_costs, terminal, n_vals, n_acq)


def fit_q_semi(
    trajectories: Sequence[Trajectory],
    target_policy: Policy,
    data: ObservedDataset,
    target: str = "J_mc",
    seed: int = 0,
    regressor: str = "mlp",
    weights: np.ndarray | None = None,
    n_iterations: int | None = None,
) -> QModel:
    """Backward fitted-Q evaluation on simulated transitions.

    Terminal targets are realized misclassification costs; interior targets
    bootstrap through the target-policy-averaged value at the realized next
    state. For J_total (and J_a) the per-step acquisition cost is added to
    interior targets. `weights` allows exactly-weighted (e.g. exhaustively
    enumerated) transition sets.
    """
    if not trajectories:
        raise ValueError("trajectory set is empty")
    if target not in ("J_mc", "J_a", "J_total"):
        raise ValueError(f"unknown target {target!r}")
    schema = data.schema
    s_vals, s_acq, acts, acq_costs, mc_costs, terminal, n_vals, n_acq = _reconstruct_transitions(
        trajectories, data
    )
    if weights is not None:
        w_steps = np.concatenate(
            [np.full(len(t.steps), w) for t, w in zip(trajectories, weights)]
        )
    else:
        w_steps = None

    immediate = np.zeros(len(acts))
    if target in ("J_mc", "J_total"):
        immediate += mc_costs
    if target in ("J_a", "J_total"):
        immediate += acq_costs

    means = np.nan_to_num(np.nanmean(data.features, axis=0))
    n_iter = n_iterations if n_iterations is not None else len(schema.costly) + 1

    if regressor == "tabular":
        q_model: QModel = TabularQ({}, schema)
    elif regressor == "ridge":
        q_model = _RegressionQ(Ridge(alpha=1e-3), means, schema)
    elif regressor == "mlp":
        q_model = _RegressionQ(
            MLPRegressor(
                hidden_layer_sizes=(16, 16),
                activation="relu",
                random_state=seed,
                max_iter=300,
                learning_rate_init=1e-3,
            ),
            means,
            schema,
        )
    else:
        raise ValueError(f"unknown regressor {regressor!r}")

    interior = ~terminal
    fitted = False
    for _ in range(n_iter):
        targets = immediate.copy()
        if fitted and interior.any():
            targets[interior] += q_model.v_batch(
                n_vals[interior], n_acq[interior], target_policy
            )
        if regressor == "tabular":
            sums: dict[tuple, float] = {}
            wsum: dict[tuple, float] = {}
            w = w_steps if w_steps is not None else np.ones(len(acts))
            for i in range(len(acts)):
                k = TabularQ.key(s_vals[i], s_acq[i], int(acts[i]))
                sums[k] = sums.get(k, 0.0) + w[i] * targets[i]
                wsum[k] = wsum.get(k, 0.0) + w[i]
            q_model = TabularQ(
                {k: sums[k] / wsum[k] for k in sums if wsum[k] > 0}, schema
            )
        else:
            X = q_model._encode(s_vals, s_acq, acts)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                q_model.model.fit(X, targets, sample_weight=w_steps)
        fitted = True
    return q_model
