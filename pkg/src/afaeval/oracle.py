"""Exact-enumeration oracle environment and the estimator-equivalence suite.

A tiny discrete problem — one free binary feature and two costly binary
features — small enough that the deployment cost, the cost-to-go function,
and the full weighted population of (row, mask) cells can all be computed
exactly. Estimators are checked against these exact values; biased baselines
are checked to be detectably biased.
"""

from __future__ import annotations

import itertools
import time

import numpy as np

from .core import (
    STOP,
    CostSpec,
    FullDataset,
    ObservedDataset,
    Superfeature,
    SuperfeatureSchema,
    Trajectory,
    TrajectoryStep,
)
from .datagen import AlwaysObserved, LogisticRate, MissingnessMechanism
from .estimators import (
    RAW,
    SELF_NORMALIZED,
    compute_weight_series,
    estimate_blocking,
    estimate_cc,
    estimate_dm_semi,
    estimate_drl_semi,
    estimate_ground_truth,
    estimate_imp_mean,
    estimate_ipw_miss,
    estimate_ipw_semi,
    estimate_ipw_semi_miss,
)
from .nuisance import (
    PropensityModel,
    TabularQ,
    ZeroQ,
    fit_q_semi,
    ground_truth_propensity,
)
from .policy import Classifier, Policy, SubsetRandomPolicy, block
from .simulate import rollout_semi_offline

# joint distribution of the three binary features
_P_X0 = 0.5
_P_X1_GIVEN_X0 = {0: 0.25, 1: 0.75}
_P_X2_GIVEN = {(0, 0): 0.2, (0, 1): 0.4, (1, 0): 0.6, (1, 1): 0.85}
_P_Y_GIVEN = lambda x0, x1, x2: 0.10 + 0.30 * x0 + 0.25 * x1 + 0.30 * x2  # noqa: E731

# observation rules (conditioning only on the always-observed feature)
_R1_RULE = LogisticRate(-0.5, {0: 1.5})
_R2_RULE = LogisticRate(-0.8, {0: 1.6})


def tiny_schema() -> SuperfeatureSchema:
    return SuperfeatureSchema(
        (
            Superfeature("x0", (0,), 0.0),
            Superfeature("x1", (1,), 1.0),
            Superfeature("x2", (2,), 1.0),
        )
    )


def tiny_costs(c_mc: float = 6.0) -> CostSpec:
    return CostSpec.from_schema(tiny_schema(), c_mc)


def tiny_mechanism() -> MissingnessMechanism:
    return MissingnessMechanism(
        (AlwaysObserved(), _R1_RULE, _R2_RULE), tiny_schema()
    )


def tiny_policy(p_acquire: float = 0.5) -> SubsetRandomPolicy:
    return SubsetRandomPolicy(p_acquire, tiny_schema())


def cell_probability(x0: int, x1: int, x2: int) -> float:
    p0 = _P_X0 if x0 == 1 else 1.0 - _P_X0
    p1 = _P_X1_GIVEN_X0[x0] if x1 == 1 else 1.0 - _P_X1_GIVEN_X0[x0]
    p2 = _P_X2_GIVEN[(x0, x1)] if x2 == 1 else 1.0 - _P_X2_GIVEN[(x0, x1)]
    return p0 * p1 * p2


def label_prob(x0: int, x1: int, x2: int) -> float:
    return _P_Y_GIVEN(x0, x1, x2)


def all_cells() -> list[tuple[int, int, int]]:
    return [c for c in itertools.product((0, 1), repeat=3)]


class RuleClassifier(Classifier):
    """Deterministic rule: predict 1 when at least two observed features are 1."""

    def __init__(self, schema: SuperfeatureSchema, threshold: float = 2.0):
        self.schema = schema
        self.threshold = float(threshold)

    def predict_batch(self, values: np.ndarray, acquired: np.ndarray) -> np.ndarray:
        score = np.nansum(values, axis=1)
        return (score >= self.threshold).astype(int)

    def to_checkpoint(self) -> dict:
        return {"kind": "rule", "threshold": self.threshold}


def _expected_mc(pred: int, p_y1: float, c_mc: float) -> float:
    return c_mc * (p_y1 if pred == 0 else 1.0 - p_y1)


def _unblocked_sequences(policy: Policy, values_row: np.ndarray):
    """Yield (steps as (action, prob) tuples, total probability, acquired set)."""
    schema = policy.schema
    d = schema.d_super

    def rec(acquired: np.ndarray, revealed: np.ndarray, prob: float, seq: tuple):
        probs = policy.probabilities(acquired, revealed)
        if probs[-1] > 0:
            yield seq + ((STOP, probs[-1]),), prob * probs[-1], acquired
        for a in schema.costly:
            if acquired[a] or probs[a] <= 0:
                continue
            acq2 = acquired.copy()
            acq2[a] = True
            rev2 = revealed.copy()
            for c in schema.columns_of(a):
                rev2[c] = values_row[c]
            yield from rec(acq2, rev2, prob * probs[a], seq + ((a, probs[a]),))

    acquired0 = np.zeros(d, dtype=bool)
    revealed0 = np.full(schema.d_raw, np.nan)
    for j in schema.free_set:
        acquired0[j] = True
        for c in schema.columns_of(j):
            revealed0[c] = values_row[c]
    yield from rec(acquired0, revealed0, 1.0, ())


def exact_value(
    policy: Policy,
    classifier: Classifier,
    costs: CostSpec,
    target: str = "J_mc",
) -> float:
    """Deployment cost by full enumeration over cells and action sequences."""
    schema = policy.schema
    total = 0.0
    for cell in all_cells():
        p_cell = cell_probability(*cell)
        if p_cell == 0.0:
            continue
        row = np.array(cell, dtype=float)
        p_y1 = label_prob(*cell)
        for seq, p_seq, acquired in _unblocked_sequences(policy, row):
            vals = np.full(schema.d_raw, np.nan)
            for j in range(schema.d_super):
                if acquired[j]:
                    for c in schema.columns_of(j):
                        vals[c] = row[c]
            pred = int(classifier.predict_batch(vals[None, :], acquired[None, :])[0])
            acq_cost = sum(
                costs.c_acq[a] for a, _ in seq if a != STOP
            )
            mc = _expected_mc(pred, p_y1, costs.c_mc)
            if target == "J_mc":
                cost = mc
            elif target == "J_a":
                cost = acq_cost
            else:
                cost = acq_cost + mc
            total += p_cell * p_seq * cost
    return total


def exact_q(
    policy: Policy, classifier: Classifier, costs: CostSpec, target: str = "J_mc"
) -> TabularQ:
    """Cost-to-go by exact dynamic programming over the belief states.

    States are (acquired set, observed values); the posterior over unobserved
    features is the conditional of the exact joint given the observations.
    """
    schema = policy.schema
    cells = all_cells()
    probs = {c: cell_probability(*c) for c in cells}
    table: dict[tuple, float] = {}
    v_memo: dict[tuple, float] = {}

    def state_key(acquired: tuple, values: tuple) -> tuple:
        return (acquired, values)

    def consistent_cells(acquired: tuple, values: tuple):
        out = []
        for c in cells:
            ok = True
            for j in range(schema.d_super):
                if acquired[j] and float(c[j]) != values[j]:
                    ok = False
                    break
            if ok and probs[c] > 0:
                out.append(c)
        return out

    def value_of(acquired: tuple, values: tuple) -> float:
        k = state_key(acquired, values)
        if k in v_memo:
            return v_memo[k]
        acq_arr = np.array(acquired, dtype=bool)
        val_arr = np.array(
            [values[j] if acquired[j] else np.nan for j in range(schema.d_raw)]
        )
        pi = policy.probabilities(acq_arr, val_arr)
        cons = consistent_cells(acquired, values)
        z = sum(probs[c] for c in cons)

        v = 0.0
        # STOP
        if pi[-1] > 0 or True:  # Q(s, STOP) is always defined
            pred = int(classifier.predict_batch(val_arr[None, :], acq_arr[None, :])[0])
            if target == "J_a":
                q_stop = 0.0
            else:
                err = sum(
                    probs[c]
                    * (label_prob(*c) if pred == 0 else 1.0 - label_prob(*c))
                    for c in cons
                )
                q_stop = costs.c_mc * err / z
            table[TabularQ.key(val_arr, acq_arr, STOP)] = q_stop
            v += pi[-1] * q_stop
        for a in schema.costly:
            if acquired[a]:
                continue
            q_a = 0.0 if target == "J_mc" else costs.c_acq[a]
            col = schema.columns_of(a)[0]
            for xv in (0.0, 1.0):
                p_xv = sum(probs[c] for c in cons if float(c[col]) == xv) / z
                if p_xv == 0.0:
                    continue
                acq2 = tuple(
                    True if j == a else acquired[j] for j in range(schema.d_super)
                )
                val2 = tuple(
                    xv if j == col else values[j] for j in range(schema.d_raw)
                )
                q_a += p_xv * value_of(acq2, val2)
            table[TabularQ.key(val_arr, acq_arr, a)] = q_a
            if pi[a] > 0:
                v += pi[a] * q_a
        v_memo[k] = v
        return v

    free = sorted(schema.free_set)
    for x0 in (0.0, 1.0):
        acquired0 = tuple(j in schema.free_set for j in range(schema.d_super))
        values0 = tuple(x0 if j in free else 0.0 for j in range(schema.d_raw))
        value_of(acquired0, values0)
    return TabularQ(table, schema)


def population_dataset() -> tuple[ObservedDataset, np.ndarray]:
    """Every (cell, label, mask) combination with its exact probability.

    Feeding these rows with their weights to weighted estimators makes
    population-level checks exact rather than statistical.
    """
    schema = tiny_schema()
    mech = tiny_mechanism()
    feats, masks, labels, weights = [], [], [], []
    for cell in all_cells():
        p_cell = cell_probability(*cell)
        if p_cell == 0:
            continue
        row = np.array(cell, dtype=float)
        r_probs = mech.mask_probabilities(row[None, :])[0]
        p_y1 = label_prob(*cell)
        for y in (0, 1):
            p_y = p_y1 if y == 1 else 1.0 - p_y1
            if p_y == 0:
                continue
            for r1, r2 in itertools.product((0, 1), repeat=2):
                p_mask = (r_probs[1] if r1 else 1 - r_probs[1]) * (
                    r_probs[2] if r2 else 1 - r_probs[2]
                )
                vals = row.copy()
                if not r1:
                    vals[1] = np.nan
                if not r2:
                    vals[2] = np.nan
                feats.append(vals)
                masks.append([1, r1, r2])
                labels.append(y)
                weights.append(p_cell * p_y * p_mask)
    data = ObservedDataset(
        np.asarray(feats), np.asarray(masks), np.asarray(labels), schema
    )
    return data, np.asarray(weights)


def enumerate_semi_offline(
    data: ObservedDataset,
    policy: Policy,
    classifier: Classifier,
    costs: CostSpec,
    row_weights: np.ndarray,
    target_policy: Policy | None = None,
) -> tuple[list[Trajectory], np.ndarray]:
    """All blocked-simulation trajectories of every row with exact weights."""
    schema = data.schema
    target_policy = target_policy or policy
    trajs: list[Trajectory] = []
    weights: list[float] = []

    for i in range(data.n):
        mask_row = data.mask[i]

        def rec(acquired, revealed, prob, steps, forced_any):
            base = policy.probabilities(acquired, revealed)
            target = target_policy.probabilities(acquired, revealed)
            blocked, forced = block(base, mask_row)
            # STOP branch
            if blocked[-1] > 0:
                pred = int(
                    classifier.predict_batch(revealed[None, :], acquired[None, :])[0]
                )
                mc = costs.c_mc * float(pred != data.labels[i])
                stop_step = TrajectoryStep(STOP, float(target[-1]), float(blocked[-1]), 0.0)
                trajs.append(
                    Trajectory(i, steps + (stop_step,), pred, mc, forced_any or forced)
                )
                weights.append(row_weights[i] * prob * blocked[-1])
            for a in schema.costly:
                if acquired[a] or blocked[a] <= 0:
                    continue
                acq2 = acquired.copy()
                acq2[a] = True
                rev2 = revealed.copy()
                for c in schema.columns_of(a):
                    rev2[c] = data.features[i, c]
                step = TrajectoryStep(
                    a, float(target[a]), float(blocked[a]), costs.c_acq[a]
                )
                rec(acq2, rev2, prob * blocked[a], steps + (step,), forced_any)

        acquired0 = np.zeros(schema.d_super, dtype=bool)
        revealed0 = np.full(schema.d_raw, np.nan)
        for j in schema.free_set:
            acquired0[j] = True
            for c in schema.columns_of(j):
                revealed0[c] = data.features[i, c]
        rec(acquired0, revealed0, 1.0, (), False)
    return trajs, np.asarray(weights)


def sample_dataset(n: int, seed: int = 0) -> tuple[FullDataset, ObservedDataset]:
    """Draw n rows from the exact joint and apply the observation rules."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    u = rng.random((n, 6))
    x0 = (u[:, 0] < _P_X0).astype(int)
    p1 = np.where(x0 == 1, _P_X1_GIVEN_X0[1], _P_X1_GIVEN_X0[0])
    x1 = (u[:, 1] < p1).astype(int)
    p2 = np.array([_P_X2_GIVEN[(a, b)] for a, b in zip(x0, x1)])
    x2 = (u[:, 2] < p2).astype(int)
    py = _P_Y_GIVEN(x0, x1, x2)
    y = (u[:, 3] < py).astype(int)
    feats = np.column_stack([x0, x1, x2]).astype(float)
    full = FullDataset(feats, y)

    mech = tiny_mechanism()
    probs = mech.mask_probabilities(feats)
    mask = np.ones((n, 3), dtype=np.int8)
    mask[:, 1] = (u[:, 4] < probs[:, 1]).astype(np.int8)
    mask[:, 2] = (u[:, 5] < probs[:, 2]).astype(np.int8)
    obs_feats = feats.copy()
    obs_feats[mask[:, 1] == 0, 1] = np.nan
    obs_feats[mask[:, 2] == 0, 2] = np.nan
    observed = ObservedDataset(obs_feats, mask, y, tiny_schema())
    return full, observed


def _check(checks: list, name: str, passed: bool, detail: str) -> None:
    checks.append({"name": name, "passed": bool(passed), "detail": detail})


def run_oracle_suite(
    n_rows: int = 200_000,
    seed: int = 0,
    p_acquire: float = 0.5,
    corrupt: str | None = None,
) -> dict:
    """Run the estimator-equivalence and reduction-identity checks.

    With corrupt="propensity" or corrupt="q", runs the double-robustness
    variant instead: the doubly robust estimator must stay accurate under the
    single corrupted nuisance while the matching single-nuisance estimator
    must fail the same tolerance.

    Returns a report dict with per-check pass/fail entries and an overall
    `passed` flag.
    """
    if corrupt is not None:
        return _run_corruption_suite(n_rows, seed, p_acquire, corrupt)
    t0 = time.time()
    schema = tiny_schema()
    costs = tiny_costs()
    policy = tiny_policy(p_acquire)
    classifier = RuleClassifier(schema)
    mech = tiny_mechanism()
    checks: list[dict] = []

    j_exact = exact_value(policy, classifier, costs, "J_mc")
    j_exact_total = exact_value(policy, classifier, costs, "J_total")

    # --- exact population checks (DM, fitted tabular Q vs dynamic program) ---
    dp_q = exact_q(policy, classifier, costs, "J_mc")
    pop, pop_w = population_dataset()
    pop_trajs, traj_w = enumerate_semi_offline(
        pop, policy, classifier, costs, pop_w
    )
    fit_q = fit_q_semi(
        pop_trajs, policy, pop, target="J_mc", regressor="tabular", weights=traj_w
    )
    q_err = max(
        abs(fit_q.table.get(k, np.nan) - v) for k, v in dp_q.table.items()
    )
    _check(checks, "tabular-q-matches-dynamic-program", q_err < 1e-6, f"max|dQ|={q_err:.2e}")

    dm = estimate_dm_semi(fit_q, pop, policy, "J_mc", row_weights=pop_w).point()
    _check(
        checks,
        "dm-exact-on-population",
        abs(dm - j_exact) < 1e-4,
        f"DM={dm:.6f} exact={j_exact:.6f}",
    )

    dm_dp = estimate_dm_semi(dp_q, pop, policy, "J_mc", row_weights=pop_w).point()
    _check(
        checks,
        "dm-with-dp-q-exact",
        abs(dm_dp - j_exact) < 1e-10,
        f"DM(DP)={dm_dp:.10f} exact={j_exact:.10f}",
    )

    # --- statistical checks on sampled data ---
    full, data = sample_dataset(n_rows, seed)
    propensity = ground_truth_propensity(mech)
    trajs = rollout_semi_offline(data, policy, classifier, costs, 1, seed + 1)
    weights = compute_weight_series(trajs, propensity, data)

    ipw = estimate_ipw_semi(trajs, weights, "J_mc", SELF_NORMALIZED, data.n)
    ipw_pt = ipw.point()
    rel_ipw = abs(ipw_pt - j_exact) / j_exact
    _check(checks, "ipw-semi-within-1pct", rel_ipw < 0.01, f"IPW={ipw_pt:.4f} rel={rel_ipw:.4f}")

    drl = estimate_drl_semi(
        trajs, weights, dp_q, policy, data, "J_mc", SELF_NORMALIZED, data.n
    )
    drl_pt = drl.point()
    rel_drl = abs(drl_pt - j_exact) / j_exact
    _check(checks, "drl-semi-within-1pct", rel_drl < 0.01, f"DRL={drl_pt:.4f} rel={rel_drl:.4f}")

    ipw_miss = estimate_ipw_miss(
        data, policy, classifier, costs, propensity, "J_mc", 1, seed + 2, RAW
    )
    miss_pt = ipw_miss.point()
    contrib = ipw_miss.num[:, 0]
    sigma = float(contrib.std(ddof=1) / np.sqrt(data.n))
    _check(
        checks,
        "ipw-miss-within-3-sigma",
        abs(miss_pt - j_exact) <= 3 * sigma,
        f"IPW-Miss={miss_pt:.4f} exact={j_exact:.4f} sigma={sigma:.4f}",
    )

    # --- reduction identities ---
    drl_zero = estimate_drl_semi(
        trajs, weights, ZeroQ(schema), policy, data, "J_mc", SELF_NORMALIZED, data.n
    )
    diff_zero = abs(drl_zero.point() - ipw_pt)
    _check(checks, "zero-q-drl-equals-ipw", diff_zero < 1e-12, f"|diff|={diff_zero:.2e}")

    n_small = min(5000, n_rows)
    complete_data = ObservedDataset(
        full.features[:n_small],
        np.ones((n_small, schema.d_super), dtype=np.int8),
        full.labels[:n_small],
        schema,
    )
    trajs_c = rollout_semi_offline(complete_data, policy, classifier, costs, 1, seed + 3)
    w_c = compute_weight_series(
        trajs_c, PropensityModel({}, schema, "GROUND_TRUTH"), complete_data
    )
    blocking_pt = estimate_blocking(trajs_c, "J_mc", n_small).point()
    ipw_c_pt = estimate_ipw_semi(trajs_c, w_c, "J_mc", RAW, n_small).point()
    gt_pt = estimate_ground_truth(trajs_c, "J_mc", n_small).point()
    diff_block = max(abs(blocking_pt - ipw_c_pt), abs(blocking_pt - gt_pt))
    _check(
        checks,
        "no-missingness-blocking-equals-ipw",
        diff_block < 1e-12,
        f"|diff|={diff_block:.2e}",
    )

    triv = PropensityModel(
        dict(propensity.factors), schema, propensity.source, adjustment=frozenset({0})
    )
    w_triv = compute_weight_series(trajs, triv, data)
    hybrid_pt = estimate_ipw_semi_miss(trajs, w_triv, "J_mc", SELF_NORMALIZED, data.n).point()
    diff_triv = abs(hybrid_pt - ipw_pt)
    _check(
        checks,
        "trivial-adjustment-hybrid-equals-ipw",
        diff_triv < 1e-12,
        f"|diff|={diff_triv:.2e}",
    )

    # --- biased baselines are detectably biased ---
    # a subsample suffices here: the baseline biases are an order of magnitude
    # wider than the bootstrap CI at this size
    n_bias = min(30_000, n_rows)
    bias_data = ObservedDataset(
        data.features[:n_bias], data.mask[:n_bias], data.labels[:n_bias], schema
    )
    for name, est in (
        ("imp-mean", estimate_imp_mean(bias_data, policy, classifier, costs, "J_mc", 1, seed + 4)),
        ("blocking", estimate_blocking(trajs, "J_mc", data.n)),
        ("cc", estimate_cc(bias_data, policy, classifier, costs, "J_mc", 1, seed + 5)),
    ):
        rep = est.report(B=100, seed=seed + 6)
        biased = not (rep.ci_low <= j_exact <= rep.ci_high)
        _check(
            checks,
            f"{name}-flagged-biased",
            biased,
            f"{name}={rep.point:.4f} CI=[{rep.ci_low:.4f},{rep.ci_high:.4f}] exact={j_exact:.4f}",
        )

    elapsed = time.time() - t0
    return {
        "passed": all(c["passed"] for c in checks),
        "checks": checks,
        "values": {
            "j_exact_mc": j_exact,
            "j_exact_total": j_exact_total,
            "ipw_semi": ipw_pt,
            "drl_semi": drl_pt,
            "dm_semi": dm,
            "ipw_miss": miss_pt,
            "mean_weight_raw": float(weights.total_final.mean()),
            "elapsed_seconds": elapsed,
        },
    }


def _run_corruption_suite(
    n_rows: int, seed: int, p_acquire: float, corrupt: str
) -> dict:
    from .nuisance import zeroed_propensity

    if corrupt not in ("propensity", "q"):
        raise ValueError("corrupt must be 'propensity' or 'q'")
    t0 = time.time()
    schema = tiny_schema()
    costs = tiny_costs()
    policy = tiny_policy(p_acquire)
    classifier = RuleClassifier(schema)
    mech = tiny_mechanism()
    checks: list[dict] = []
    tol = 0.01

    j_exact = exact_value(policy, classifier, costs, "J_mc")
    dp_q = exact_q(policy, classifier, costs, "J_mc")
    _, data = sample_dataset(n_rows, seed)
    trajs = rollout_semi_offline(data, policy, classifier, costs, 1, seed + 1)

    if corrupt == "propensity":
        prop = zeroed_propensity(ground_truth_propensity(mech))
        q_model: TabularQ | ZeroQ = dp_q
    else:
        prop = ground_truth_propensity(mech)
        q_model = ZeroQ(schema)
    weights = compute_weight_series(trajs, prop, data)

    drl_pt = estimate_drl_semi(
        trajs, weights, q_model, policy, data, "J_mc", SELF_NORMALIZED, data.n
    ).point()
    rel_drl = abs(drl_pt - j_exact) / j_exact
    _check(
        checks,
        f"drl-robust-to-corrupted-{corrupt}",
        rel_drl < tol,
        f"DRL={drl_pt:.4f} exact={j_exact:.4f} rel={rel_drl:.4f}",
    )

    if corrupt == "propensity":
        single_pt = estimate_ipw_semi(
            trajs, weights, "J_mc", SELF_NORMALIZED, data.n
        ).point()
        single_name = "ipw-semi"
    else:
        single_pt = estimate_dm_semi(q_model, data, policy, "J_mc").point()
        single_name = "dm-semi"
    rel_single = abs(single_pt - j_exact) / j_exact
    _check(
        checks,
        f"{single_name}-fails-under-corrupted-{corrupt}",
        rel_single >= tol,
        f"{single_name}={single_pt:.4f} exact={j_exact:.4f} rel={rel_single:.4f}",
    )

    return {
        "passed": all(c["passed"] for c in checks),
        "checks": checks,
        "values": {
            "j_exact_mc": j_exact,
            "drl_semi": drl_pt,
            single_name.replace("-", "_"): single_pt,
            "elapsed_seconds": time.time() - t0,
        },
    }
