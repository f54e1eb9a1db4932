"""Point estimators for deployment cost, bootstrap CIs, and weight diagnostics.

All estimators reduce to per-row sufficient statistics so that percentile
bootstrap (row resampling, no nuisance refitting) and convergence-by-n curves
reuse the same arrays. Weights follow the telescoping recurrence
rho^t = rho^{t-1} * [pi_alpha(a)/pi_sim(a)] * [P(R>=r'^{t-1})/P(R>=r'^t)],
with the availability indicator identically 1 on blocked simulations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    STOP,
    CostSpec,
    EstimateReport,
    FullDataset,
    ObservedDataset,
    Trajectory,
)
from .nuisance import (
    PROPENSITY_FLOOR,
    PropensityInevaluableError,
    PropensityModel,
    QModel,
    _reconstruct_transitions,
)
from .policy import Classifier, Policy
from .simulate import rollout_ground_truth

RAW = "RAW"
SELF_NORMALIZED = "SELF_NORMALIZED"


@dataclass
class WeightSeries:
    """Cumulative importance weights per trajectory.

    steps[i][t-1] holds rho^t for the t-th step of trajectory i (the final
    entry is rho^T). `miss` is the adjustment-set reweighting factor for the
    hybrid estimator (1.0 when no adjustment is configured).
    """

    steps: list[np.ndarray]
    final: np.ndarray
    miss: np.ndarray
    rows: np.ndarray
    final_propensity: np.ndarray
    floored: int
    forced: np.ndarray
    adjustment: frozenset = field(default_factory=frozenset)

    @property
    def total_final(self) -> np.ndarray:
        return self.miss * self.final


def compute_weight_series(
    trajectories: Sequence[Trajectory],
    propensity: PropensityModel,
    data: ObservedDataset,
    floor: float = PROPENSITY_FLOOR,
) -> WeightSeries:
    """Evaluate the weight recurrence against a propensity model.

    If the model carries an adjustment set (MNAR pattern), rows whose
    adjustment features are unobserved receive weight zero through the
    indicator and the semi-offline denominators condition on the adjustment.
    """
    probs = propensity.per_superfeature_probs(data.features, data.mask)
    adjustment = propensity.adjustment
    adj = sorted(adjustment)
    factored = set(propensity.factors)

    steps_out: list[np.ndarray] = []
    final = np.empty(len(trajectories))
    miss = np.ones(len(trajectories))
    rows = np.empty(len(trajectories), dtype=int)
    final_prop = np.empty(len(trajectories))
    forced = np.zeros(len(trajectories), dtype=bool)
    floored = 0

    for i, traj in enumerate(trajectories):
        row = traj.row_index
        rows[i] = row
        forced[i] = traj.forced_stop

        if adj:
            adj_observed = bool(data.mask[row, adj].astype(bool).all())
            denom_miss = 1.0
            for j in adj:
                if j in factored:
                    denom_miss *= probs[row, j]
            if not adj_observed:
                miss[i] = 0.0
                steps_out.append(np.zeros(len(traj.steps)))
                final[i] = 0.0
                final_prop[i] = np.nan
                continue
            if denom_miss < floor:
                floored += 1
                denom_miss = floor
            miss[i] = 1.0 / denom_miss

        ratio = 1.0
        denom = 1.0
        rho = np.empty(len(traj.steps))
        for t, step in enumerate(traj.steps):
            if step.p_sim <= 0:
                raise ValueError("sampled step has zero sampling probability")
            ratio *= step.p_alpha / step.p_sim
            if step.action != STOP and step.action in factored and step.action not in adjustment:
                p = probs[row, step.action]
                if np.isnan(p):
                    raise PropensityInevaluableError(
                        f"row {row}: propensity inevaluable for superfeature "
                        f"{step.action}; use the hybrid estimator with an adjustment set"
                    )
                denom *= p
            eff = denom
            if eff < floor:
                floored += 1
                eff = floor
            rho[t] = ratio / eff
        steps_out.append(rho)
        final[i] = rho[-1]
        final_prop[i] = denom
    return WeightSeries(
        steps_out, final, miss, rows, final_prop, floored, forced, adjustment
    )


def bootstrap_ci(
    point_fn: Callable[[np.ndarray], float],
    n_units: int,
    B: int,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap over unit (row) indices, no refitting."""
    if B < 2:
        raise ValueError("B must be >= 2")
    rng = np.random.Generator(np.random.Philox(key=seed))
    values = np.empty(B)
    for b in range(B):
        idx = rng.integers(0, n_units, n_units)
        values[b] = point_fn(idx)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


@dataclass
class PointEstimator:
    """A point estimate expressed as per-row sufficient statistics.

    `num` and `den` are (n_units, K) matrices; the estimate for any row
    subset is combine(num[idx].sum(0), den[idx].sum(0)).
    """

    name: str
    target: str
    num: np.ndarray
    den: np.ndarray
    combine: Callable[[np.ndarray, np.ndarray], float]
    n_trajectories: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.num.shape[0]

    def point(self, idx: np.ndarray | None = None) -> float:
        if idx is None:
            return float(self.combine(self.num.sum(axis=0), self.den.sum(axis=0)))
        return float(self.combine(self.num[idx].sum(axis=0), self.den[idx].sum(axis=0)))

    def report(
        self, B: int | None = None, level: float = 0.95, seed: int = 0
    ) -> EstimateReport:
        ci_low = ci_high = None
        point = self.point()
        if B:
            ci_low, ci_high = bootstrap_ci(self.point, self.n_rows, B, level, seed)
            ci_low = min(ci_low, point)
            ci_high = max(ci_high, point)
        return EstimateReport(
            self.name,
            self.target,
            point,
            ci_low,
            ci_high,
            self.n_rows,
            self.n_trajectories,
            dict(self.diagnostics),
        )


def _safe_div(a: float, b: float) -> float:
    return a / b if b != 0 else 0.0


def _mean_estimator(
    name: str,
    target: str,
    trajectories: Sequence[Trajectory],
    n_rows: int,
    include: np.ndarray | None = None,
    diagnostics: dict | None = None,
) -> PointEstimator:
    """Plain per-trajectory cost mean, grouped by row for the bootstrap."""
    num = np.zeros((n_rows, 1))
    den = np.zeros((n_rows, 1))
    kept = 0
    for i, traj in enumerate(trajectories):
        if include is not None and not include[i]:
            continue
        num[traj.row_index, 0] += traj.cost_for(target)
        den[traj.row_index, 0] += 1.0
        kept += 1
    if kept == 0:
        raise ValueError(f"{name}: no trajectories to average")
    return PointEstimator(
        name,
        target,
        num,
        den,
        lambda n, d: _safe_div(n[0], d[0]),
        kept,
        diagnostics or {},
    )


def _infer_n_rows(trajectories: Sequence[Trajectory], n_rows: int | None) -> int:
    if n_rows is not None:
        return n_rows
    return max(t.row_index for t in trajectories) + 1


def estimate_ground_truth(
    trajectories: Sequence[Trajectory], target: str = "J_mc", n_rows: int | None = None
) -> PointEstimator:
    """Reference value: empirical mean over unblocked full-data rollouts."""
    if not trajectories:
        raise ValueError("no trajectories")
    return _mean_estimator("j-ground-truth", target, trajectories, _infer_n_rows(trajectories, n_rows))


def estimate_blocking(
    trajectories: Sequence[Trajectory], target: str = "J_mc", n_rows: int | None = None
) -> PointEstimator:
    """Unadjusted mean of blocked-simulation costs (biased baseline)."""
    if not trajectories:
        raise ValueError("no trajectories")
    return _mean_estimator("blocking", target, trajectories, _infer_n_rows(trajectories, n_rows))


def estimate_imp_mean(
    data: ObservedDataset,
    policy: Policy,
    classifier: Classifier,
    costs: CostSpec,
    target: str = "J_mc",
    n_traj_per_row: int = 1,
    seed: int = 0,
) -> PointEstimator:
    """Mean-imputation baseline: fill missing values with column means and
    roll out as if the data were complete (biased by construction)."""
    means = np.nan_to_num(np.nanmean(data.features, axis=0))
    imputed = np.where(np.isnan(data.features), means[None, :], data.features)
    full = FullDataset(imputed, data.labels)
    trajs = rollout_ground_truth(
        full, policy, classifier, costs, data.schema, n_traj_per_row, seed
    )
    est = _mean_estimator("imp-mean", target, trajs, data.n)
    return est


def estimate_cc(
    data: ObservedDataset,
    policy: Policy,
    classifier: Classifier,
    costs: CostSpec,
    target: str = "J_mc",
    n_traj_per_row: int = 1,
    seed: int = 0,
) -> PointEstimator:
    """Complete-case mean: unblocked rollouts restricted to rows with every
    superfeature observed (unbiased only under MCAR)."""
    complete = data.complete
    if not complete.any():
        raise ValueError("no complete cases")
    idx = np.where(complete)[0]
    full = FullDataset(data.features[idx], data.labels[idx])
    trajs = rollout_ground_truth(
        full, policy, classifier, costs, data.schema, n_traj_per_row, seed
    )
    num = np.zeros((data.n, 1))
    den = np.zeros((data.n, 1))
    for traj in trajs:
        row = idx[traj.row_index]
        num[row, 0] += traj.cost_for(target)
        den[row, 0] += 1.0
    return PointEstimator(
        "cc",
        target,
        num,
        den,
        lambda n, d: _safe_div(n[0], d[0]),
        len(trajs),
        {"complete_fraction": float(complete.mean())},
    )


def estimate_ipw_miss(
    data: ObservedDataset,
    policy: Policy,
    classifier: Classifier,
    costs: CostSpec,
    propensity: PropensityModel,
    target: str = "J_mc",
    n_traj_per_row: int = 1,
    seed: int = 0,
    normalization: str = SELF_NORMALIZED,
    floor: float = PROPENSITY_FLOOR,
) -> PointEstimator:
    """Missing-data IPW: complete cases reweighted by 1/P(R = all-ones | row),
    with a Monte Carlo rollout supplying the per-row cost."""
    complete = data.complete
    if not complete.any():
        raise ValueError("no complete cases to reweight")
    idx = np.where(complete)[0]
    probs = propensity.per_superfeature_probs(data.features, data.mask)
    p_complete = np.nanprod(probs[idx], axis=1)
    floored = int((p_complete < floor).sum())
    weights = 1.0 / np.maximum(p_complete, floor)

    full = FullDataset(data.features[idx], data.labels[idx])
    trajs = rollout_ground_truth(
        full, policy, classifier, costs, data.schema, n_traj_per_row, seed
    )
    mean_cost = np.zeros(len(idx))
    counts = np.zeros(len(idx))
    for traj in trajs:
        mean_cost[traj.row_index] += traj.cost_for(target)
        counts[traj.row_index] += 1.0
    mean_cost /= counts

    num = np.zeros((data.n, 1))
    den = np.zeros((data.n, 1))
    num[idx, 0] = weights * mean_cost
    if normalization == SELF_NORMALIZED:
        den[idx, 0] = weights
    else:
        den[:, 0] = 1.0
    ess = _safe_div(weights.sum() ** 2, (weights**2).sum())
    return PointEstimator(
        "ipw-miss",
        target,
        num,
        den,
        lambda n, d: _safe_div(n[0], d[0]),
        len(trajs),
        {
            "mean_weight": float(weights.sum() / data.n),
            "min_propensity": float(p_complete.min()),
            "ess": float(ess),
            "floored": float(floored),
        },
    )


_H_EXTRA = 2  # step axis: index t for rho^t, t = 0..H


def _step_tables(
    trajectories: Sequence[Trajectory],
    weights: WeightSeries,
    target: str,
    n_rows: int,
    horizon: int,
):
    """Per-row sums of rho^t * c^t and absorbing rho~^t, t = 0..horizon."""
    num = np.zeros((n_rows, horizon + 1))
    den = np.zeros((n_rows, horizon + 1))
    counts = np.zeros((n_rows, 1))
    for i, traj in enumerate(trajectories):
        row = traj.row_index
        w_miss = weights.miss[i]
        rho = weights.steps[i]
        counts[row, 0] += 1.0
        den[row, 0] += w_miss
        for t in range(1, horizon + 1):
            r = rho[t - 1] if t - 1 < len(rho) else rho[-1]
            den[row, t] += w_miss * r
        for t, step in enumerate(traj.steps, start=1):
            c = 0.0
            if step.action == STOP:
                if target in ("J_mc", "J_total"):
                    c = traj.mc_cost
            else:
                if target in ("J_a", "J_total"):
                    c = step.acquisition_cost
            if c != 0.0:
                num[row, t] += w_miss * rho[t - 1] * c
    return num, den, counts


def _horizon(trajectories: Sequence[Trajectory]) -> int:
    return max(len(t.steps) for t in trajectories)


def _weight_diagnostics(weights: WeightSeries, n_traj: int) -> dict:
    w = weights.total_final
    ess = _safe_div(w.sum() ** 2, (w**2).sum())
    finite_prop = weights.final_propensity[np.isfinite(weights.final_propensity)]
    return {
        "mean_weight": float(w.mean()),
        "min_propensity": float(finite_prop.min()) if len(finite_prop) else float("nan"),
        "ess": float(ess),
        "floored": float(weights.floored),
        "forced_stop_frac": float(weights.forced.mean()),
    }


def _ipw_like(
    name: str,
    trajectories: Sequence[Trajectory],
    weights: WeightSeries,
    target: str,
    normalization: str,
    n_rows: int,
) -> PointEstimator:
    horizon = _horizon(trajectories)
    num, den, counts = _step_tables(trajectories, weights, target, n_rows, horizon)
    num_all = np.column_stack([num, den, counts])
    H = horizon

    def combine(nsum: np.ndarray, dsum: np.ndarray) -> float:
        c_t = nsum[: H + 1]
        rho_t = nsum[H + 1 : 2 * (H + 1)]
        n_cnt = nsum[-1]
        total = 0.0
        for t in range(1, H + 1):
            d = rho_t[t] if normalization == SELF_NORMALIZED else n_cnt
            total += _safe_div(c_t[t], d)
        return total

    return PointEstimator(
        name,
        target,
        num_all,
        np.zeros((n_rows, 1)),
        lambda n, d: combine(n, d),
        len(trajectories),
        _weight_diagnostics(weights, len(trajectories)),
    )


def estimate_ipw_semi(
    trajectories: Sequence[Trajectory],
    weights: WeightSeries,
    target: str = "J_mc",
    normalization: str = SELF_NORMALIZED,
    n_rows: int | None = None,
) -> PointEstimator:
    """Semi-offline IPW: per-step cumulative weights applied to per-step costs
    (for the misclassification target this is rho^T * C')."""
    if weights.adjustment:
        raise ValueError(
            "weights carry an adjustment set; use estimate_ipw_semi_miss"
        )
    return _ipw_like(
        "ipw-semi", trajectories, weights, target, normalization, _infer_n_rows(trajectories, n_rows)
    )


def estimate_ipw_semi_miss(
    trajectories: Sequence[Trajectory],
    weights: WeightSeries,
    target: str = "J_mc",
    normalization: str = SELF_NORMALIZED,
    n_rows: int | None = None,
) -> PointEstimator:
    """Hybrid estimator for MNAR: semi-offline weights conditioned on the
    adjustment features times the adjustment-set completeness weight."""
    if not weights.adjustment:
        raise ValueError("no adjustment set configured; use estimate_ipw_semi")
    return _ipw_like(
        "ipw-semi-miss", trajectories, weights, target, normalization, _infer_n_rows(trajectories, n_rows)
    )


def estimate_dm_semi(
    q_model: QModel,
    data: ObservedDataset,
    target_policy: Policy,
    target: str = "J_mc",
    row_weights: np.ndarray | None = None,
) -> PointEstimator:
    """Direct method: mean of the policy-averaged value at the initial state."""
    schema = data.schema
    free = sorted(schema.free_set)
    free_cols = [c for j in free for c in schema.columns_of(j)]
    acq0 = np.zeros((data.n, schema.d_super), dtype=bool)
    acq0[:, free] = True
    val0 = np.full((data.n, schema.d_raw), np.nan)
    val0[:, free_cols] = data.features[:, free_cols]
    v0 = q_model.v_batch(val0, acq0, target_policy)
    w = np.ones(data.n) if row_weights is None else np.asarray(row_weights, dtype=float)
    num = (w * v0)[:, None]
    den = w[:, None]
    return PointEstimator(
        "dm-semi",
        target,
        num,
        den,
        lambda n, d: _safe_div(n[0], d[0]),
        0,
        {"mean_v0": float(_safe_div((w * v0).sum(), w.sum()))},
    )


def estimate_drl_semi(
    trajectories: Sequence[Trajectory],
    weights: WeightSeries,
    q_model: QModel,
    target_policy: Policy,
    data: ObservedDataset,
    target: str = "J_mc",
    normalization: str = SELF_NORMALIZED,
    n_rows: int | None = None,
) -> PointEstimator:
    """Doubly robust combination: the IPW term plus per-step control variates
    -rho^t Q^t + rho^{t-1} V^{t-1} (consistent if either nuisance is right)."""
    n_rows = _infer_n_rows(trajectories, n_rows)
    horizon = _horizon(trajectories)
    num, den, counts = _step_tables(trajectories, weights, target, n_rows, horizon)

    s_vals, s_acq, acts, _, _, _, _, _ = _reconstruct_transitions(trajectories, data)
    q_vals = q_model.q_batch(s_vals, s_acq, acts)
    v_vals = q_model.v_batch(s_vals, s_acq, target_policy)

    q_num = np.zeros((n_rows, horizon + 1))
    v_num = np.zeros((n_rows, horizon + 1))
    k = 0
    for i, traj in enumerate(trajectories):
        row = traj.row_index
        w_miss = weights.miss[i]
        rho = weights.steps[i]
        for t in range(1, len(traj.steps) + 1):
            rho_prev = 1.0 if t == 1 else rho[t - 2]
            q_num[row, t] += w_miss * rho[t - 1] * q_vals[k]
            v_num[row, t] += w_miss * rho_prev * v_vals[k]
            k += 1

    H = horizon
    num_all = np.column_stack([num, q_num, v_num, den, counts])

    def combine(nsum: np.ndarray, dsum: np.ndarray) -> float:
        c_t = nsum[0 : H + 1]
        q_t = nsum[H + 1 : 2 * (H + 1)]
        v_t = nsum[2 * (H + 1) : 3 * (H + 1)]
        rho_t = nsum[3 * (H + 1) : 4 * (H + 1)]
        n_cnt = nsum[-1]
        total = 0.0
        for t in range(1, H + 1):
            if normalization == SELF_NORMALIZED:
                d_t = rho_t[t]
                d_prev = rho_t[t - 1]
            else:
                d_t = d_prev = n_cnt
            total += _safe_div(c_t[t] - q_t[t], d_t) + _safe_div(v_t[t], d_prev)
        return total

    return PointEstimator(
        "drl-semi",
        target,
        num_all,
        np.zeros((n_rows, 1)),
        lambda n, d: combine(n, d),
        len(trajectories),
        _weight_diagnostics(weights, len(trajectories)),
    )


def positivity_diagnostics(
    trajectories: Sequence[Trajectory], weights: WeightSeries
) -> dict:
    """Support diagnostics: final-propensity quantiles, floored evaluations,
    forced-stop fraction, and effective sample size of the final weights."""
    prop = weights.final_propensity
    finite = prop[np.isfinite(prop)]
    w = weights.total_final
    ess = _safe_div(w.sum() ** 2, (w**2).sum())
    out = {
        "n_trajectories": float(len(trajectories)),
        "floored": float(weights.floored),
        "forced_stop_frac": float(weights.forced.mean()),
        "ess": float(ess),
        "mean_weight": float(w.mean()),
    }
    if len(finite):
        out["min_propensity"] = float(finite.min())
        for q in (0.01, 0.05, 0.5):
            out[f"propensity_q{int(q * 100):02d}"] = float(np.quantile(finite, q))
    return out
