"""Episode simulation: blocked sampling on retrospective rows and the
unblocked Monte Carlo ground-truth evaluator.

Random draws are keyed positionally by (seed, row, episode, step), so results
are independent of traversal order and safe to parallelize across rows.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    STOP,
    CostSpec,
    FullDataset,
    ObservedDataset,
    SuperfeatureSchema,
    Trajectory,
    TrajectoryStep,
)
from .policy import Classifier, Policy


def _rollout(
    features: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray | None,
    schema: SuperfeatureSchema,
    policy: Policy,
    target_policy: Policy,
    classifier: Classifier,
    costs: CostSpec,
    n_traj_per_row: int,
    seed: int,
) -> list[Trajectory]:
    n = features.shape[0]
    d_super = schema.d_super
    costly = np.asarray(schema.costly, dtype=int)
    horizon = len(costly) + 1
    free = sorted(schema.free_set)
    free_cols = [c for j in free for c in schema.columns_of(j)]
    same_policy = target_policy is policy

    rng = np.random.Generator(np.random.Philox(key=seed))
    uniforms = rng.random((n, n_traj_per_row, horizon)).reshape(-1, horizon)

    # All episodes advance one step per iteration; a step records per-episode
    # action, target-policy probability, and sampling probability.
    n_ep = n * n_traj_per_row
    rows = np.repeat(np.arange(n), n_traj_per_row)
    acquired = np.zeros((n_ep, d_super), dtype=bool)
    acquired[:, free] = True
    values = np.full((n_ep, schema.d_raw), np.nan)
    if free_cols:
        values[:, free_cols] = features[np.ix_(rows, free_cols)]
    mask_ep = np.asarray(mask)[rows] if mask is not None else None

    no_step = -2  # sentinel distinct from STOP
    step_action = np.full((n_ep, horizon), no_step, dtype=int)
    step_palpha = np.zeros((n_ep, horizon))
    step_psim = np.zeros((n_ep, horizon))
    forced_any = np.zeros(n_ep, dtype=bool)
    alive = np.ones(n_ep, dtype=bool)

    for t in range(horizon):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        acq_t, val_t = acquired[idx], values[idx]
        base = policy.probabilities_batch(acq_t, val_t)
        if mask_ep is not None:
            probs = np.array(base, dtype=float)
            blocked = mask_ep[idx, :d_super] == 0
            probs[:, :-1][blocked] = 0.0
            total = probs.sum(axis=1)
            forced = total <= 0.0
            live = ~forced
            probs[live] = probs[live] / total[live, None]
            if forced.any():
                probs[forced] = 0.0
                probs[forced, -1] = 1.0
        else:
            probs = base
            forced = np.zeros(idx.size, dtype=bool)

        u = uniforms[idx, t]
        cums = np.cumsum(probs[:, costly], axis=1)
        hit = u[:, None] < cums
        found = hit.any(axis=1)
        action = np.where(found, costly[hit.argmax(axis=1)], STOP)

        sel = np.nonzero(found)[0]
        p_sim = probs[:, -1].copy()
        p_sim[sel] = probs[sel, action[sel]]
        if same_policy and mask_ep is None:
            p_alpha = p_sim
        else:
            tgt = base if same_policy else target_policy.probabilities_batch(acq_t, val_t)
            p_alpha = tgt[:, -1].copy()
            p_alpha[sel] = tgt[sel, action[sel]]

        step_action[idx, t] = action
        step_palpha[idx, t] = p_alpha
        step_psim[idx, t] = p_sim

        stop_idx = idx[~found]
        forced_any[stop_idx] |= forced[~found]
        alive[stop_idx] = False

        go_idx = idx[found]
        if go_idx.size:
            a_go = action[found]
            acquired[go_idx, a_go] = True
            for j in costly:
                rows_j = go_idx[a_go == j]
                if rows_j.size:
                    cols = list(schema.columns_of(j))
                    values[np.ix_(rows_j, cols)] = features[np.ix_(rows[rows_j], cols)]

    predictions = classifier.predict_batch(values, acquired)
    c_acq = costs.c_acq
    out = []
    for k in range(n_ep):
        i = int(rows[k])
        steps: list[TrajectoryStep] = []
        for t in range(horizon):
            a = int(step_action[k, t])
            if a == no_step:
                break
            if a == STOP:
                steps.append(
                    TrajectoryStep(STOP, float(step_palpha[k, t]), float(step_psim[k, t]), 0.0)
                )
                break
            steps.append(
                TrajectoryStep(a, float(step_palpha[k, t]), float(step_psim[k, t]), c_acq[a])
            )
        pred = int(predictions[k])
        mc = costs.c_mc if pred != labels[i] else 0.0
        out.append(Trajectory(i, tuple(steps), pred, mc, bool(forced_any[k])))
    return out


def rollout_semi_offline(
    data: ObservedDataset,
    base_policy: Policy,
    classifier: Classifier,
    costs: CostSpec,
    n_traj_per_row: int = 1,
    seed: int = 0,
    target_policy: Policy | None = None,
) -> list[Trajectory]:
    """Simulate blocked episodes on each retrospective row.

    Actions are sampled from the blocked base policy; each step records the
    unblocked target-policy probability (numerator of importance weights) and
    the blocked sampling probability. With target_policy=None the base policy
    is also the target.
    """
    if n_traj_per_row < 1:
        raise ValueError("n_traj_per_row must be >= 1")
    target = target_policy if target_policy is not None else base_policy
    return _rollout(
        data.features,
        data.labels,
        data.mask,
        data.schema,
        base_policy,
        target,
        classifier,
        costs,
        n_traj_per_row,
        seed,
    )


def rollout_ground_truth(
    full: FullDataset,
    policy: Policy,
    classifier: Classifier,
    costs: CostSpec,
    schema: SuperfeatureSchema,
    n_traj_per_row: int = 1,
    seed: int = 0,
) -> list[Trajectory]:
    """Unblocked episodes on fully-observed data: the Monte Carlo reference."""
    if n_traj_per_row < 1:
        raise ValueError("n_traj_per_row must be >= 1")
    return _rollout(
        full.features,
        full.labels,
        None,
        schema,
        policy,
        policy,
        classifier,
        costs,
        n_traj_per_row,
        seed,
    )


def dump_trajectories(trajectories: Sequence[Trajectory], path: str | Path) -> None:
    """One CSV row per step; the terminal STOP row carries prediction and
    misclassification cost."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["row", "episode", "step", "action", "p_alpha", "p_sim", "cost", "forced", "prediction", "mc_cost"]
        )
        episode_of: dict[int, int] = {}
        for traj in trajectories:
            e = episode_of.get(traj.row_index, 0)
            episode_of[traj.row_index] = e + 1
            for t, step in enumerate(traj.steps):
                terminal = step.action == STOP
                writer.writerow(
                    [
                        traj.row_index,
                        e,
                        t,
                        "STOP" if terminal else step.action,
                        repr(step.p_alpha),
                        repr(step.p_sim),
                        repr(step.acquisition_cost),
                        int(traj.forced_stop and terminal),
                        traj.prediction if terminal else "",
                        repr(traj.mc_cost) if terminal else "",
                    ]
                )


def load_trajectories(path: str | Path) -> list[Trajectory]:
    path = Path(path)
    out: list[Trajectory] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        current_key = None
        steps: list[TrajectoryStep] = []
        for rec in reader:
            key = (int(rec["row"]), int(rec["episode"]))
            if key != current_key:
                current_key = key
                steps = []
            action = STOP if rec["action"] == "STOP" else int(rec["action"])
            steps.append(
                TrajectoryStep(action, float(rec["p_alpha"]), float(rec["p_sim"]), float(rec["cost"]))
            )
            if action == STOP:
                out.append(
                    Trajectory(
                        key[0],
                        tuple(steps),
                        int(rec["prediction"]),
                        float(rec["mc_cost"]),
                        bool(int(rec["forced"])),
                    )
                )
    return out
