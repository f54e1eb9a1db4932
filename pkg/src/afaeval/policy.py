"""Acquisition policies, the blocking transformation, and classifiers.

Policies map an acquisition state to a distribution over actions
{acquire superfeature j, STOP}. Distributions are length d_super+1 arrays
with STOP at the last index. Free superfeatures are revealed at step 0 and
are never actions. All policies and classifiers here are order-invariant:
they depend on the acquisition history only through the acquired set.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression, Ridge

from .core import (
    STOP,
    AcquisitionState,
    CostSpec,
    ObservedDataset,
    SuperfeatureSchema,
    Trajectory,
    initial_state,
)


@dataclass(frozen=True)
class ActionDistribution:
    """Probabilities over {superfeature 0..d_super-1, STOP (last slot)}."""

    probs: np.ndarray
    forced: bool = False

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=float)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("action probabilities must sum to 1")
        if np.any(probs < 0):
            raise ValueError("action probabilities must be nonnegative")

    @property
    def stop(self) -> float:
        return float(self.probs[-1])

    def prob_of(self, action: int) -> float:
        return float(self.probs[-1] if action == STOP else self.probs[action])


def schema_hash(schema: SuperfeatureSchema) -> str:
    blob = json.dumps(schema.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class Policy:
    """Base class; subclasses implement raw probability arrays."""

    schema: SuperfeatureSchema

    def probabilities(self, acquired: np.ndarray, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def probabilities_batch(self, acquired: np.ndarray, values: np.ndarray) -> np.ndarray:
        """(n, d_super+1) matrix of action probabilities; default row loop."""
        out = np.empty((acquired.shape[0], self.schema.d_super + 1))
        for i in range(acquired.shape[0]):
            out[i] = self.probabilities(acquired[i], values[i])
        return out

    def action_distribution(self, state: AcquisitionState) -> ActionDistribution:
        return ActionDistribution(self.probabilities(state.acquired, state.values))

    def to_checkpoint(self) -> dict:
        raise NotImplementedError


def block(base: np.ndarray, mask_row: np.ndarray) -> tuple[np.ndarray, bool]:
    """Zero out unavailable acquisitions and renormalize proportionally.

    If every positive-probability action is blocked and STOP had probability 0,
    the result is a forced STOP (flagged); downstream importance weights are
    zero for such steps because the target policy's STOP probability is 0.
    """
    out = np.array(base, dtype=float)
    blocked = np.asarray(mask_row)[: len(out) - 1] == 0
    out[:-1][blocked] = 0.0
    total = out.sum()
    if total <= 0.0:
        out[:] = 0.0
        out[-1] = 1.0
        return out, True
    return out / total, False


def block_policy(base: ActionDistribution, mask_row: np.ndarray) -> ActionDistribution:
    probs, forced = block(base.probs, mask_row)
    return ActionDistribution(probs, forced)


class SubsetRandomPolicy(Policy):
    """Acquire a Bernoulli(p) random subset of costly superfeatures, in
    uniformly random order, then stop.

    The sequential conditionals have a closed form. With t acquisitions so far
    and m remaining candidates the probability of the observed ordered prefix
    is w(t, m) = sum_k C(m,k) p^(t+k) (1-p)^(m-k) k!/(t+k)!; the next-step
    conditionals are ratios of w values, so evaluation is O(1) per step from a
    precomputed table. Exchangeable: depends only on (t, candidate set).
    """

    def __init__(self, p_acquire: float, schema: SuperfeatureSchema):
        if not 0 <= p_acquire <= 1:
            raise ValueError("p_acquire must be in [0, 1]")
        self.p_acquire = float(p_acquire)
        self.schema = schema
        self._costly = np.array(schema.costly, dtype=int)
        m_total = len(self._costly)
        self._w = np.zeros((m_total + 2, m_total + 1))
        p = self.p_acquire
        for t in range(m_total + 2):
            for m in range(m_total + 1):
                if t + m > m_total + 1:
                    continue
                self._w[t, m] = sum(
                    math.comb(m, k)
                    * p ** (t + k)
                    * (1 - p) ** (m - k)
                    * math.factorial(k)
                    / math.factorial(t + k)
                    for k in range(m + 1)
                )

        self._stop_tab = np.ones((m_total + 1, m_total + 1))
        self._each_tab = np.zeros((m_total + 1, m_total + 1))
        for t in range(m_total + 1):
            for m in range(m_total + 1 - t):
                w_tm = self._w[t, m]
                if w_tm <= 0.0:
                    continue
                self._stop_tab[t, m] = (
                    p**t * (1 - p) ** m / (math.factorial(t) * w_tm)
                )
                if m > 0:
                    self._each_tab[t, m] = self._w[t + 1, m - 1] / w_tm

    def step_probs(self, t: int, m: int) -> tuple[float, float]:
        """(P(STOP), P(next = one specific candidate)) given t acquired, m remaining."""
        return self._stop_tab[t, m], self._each_tab[t, m]

    def probabilities(self, acquired: np.ndarray, values: np.ndarray) -> np.ndarray:
        d = self.schema.d_super
        out = np.zeros(d + 1)
        candidates = self._costly[~acquired[self._costly]]
        t = len(self._costly) - len(candidates)
        stop, each = self.step_probs(t, len(candidates))
        out[-1] = stop
        out[candidates] = each
        return out

    def probabilities_batch(self, acquired: np.ndarray, values: np.ndarray) -> np.ndarray:
        n = acquired.shape[0]
        d = self.schema.d_super
        m_total = len(self._costly)
        t = acquired[:, self._costly].sum(axis=1).astype(int)
        m = m_total - t
        stop = np.empty(m_total + 1)
        each = np.empty(m_total + 1)
        for tt in range(m_total + 1):
            stop[tt], each[tt] = self.step_probs(tt, m_total - tt)
        out = np.zeros((n, d + 1))
        out[:, -1] = stop[t]
        cand = np.zeros((n, d), dtype=bool)
        cand[:, self._costly] = ~acquired[:, self._costly]
        out[:, :-1] = cand * each[t][:, None]
        return out

    def to_checkpoint(self) -> dict:
        return {
            "kind": "subset_random",
            "p_acquire": self.p_acquire,
            "schema_hash": schema_hash(self.schema),
        }


class StopPolicy(Policy):
    """Always stops immediately."""

    def __init__(self, schema: SuperfeatureSchema):
        self.schema = schema

    def probabilities(self, acquired: np.ndarray, values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.schema.d_super + 1)
        out[-1] = 1.0
        return out

    def to_checkpoint(self) -> dict:
        return {"kind": "stop", "schema_hash": schema_hash(self.schema)}


class FixedSetPolicy(Policy):
    """Deterministically acquires a fixed set of costly superfeatures
    (lowest index first), then stops."""

    def __init__(self, target_set: Sequence[int], schema: SuperfeatureSchema):
        self.target_set = tuple(sorted(int(j) for j in target_set))
        self.schema = schema
        for j in self.target_set:
            if j in schema.free_set:
                raise ValueError("free superfeatures are never actions")

    def probabilities(self, acquired: np.ndarray, values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.schema.d_super + 1)
        for j in self.target_set:
            if not acquired[j]:
                out[j] = 1.0
                return out
        out[-1] = 1.0
        return out

    def to_checkpoint(self) -> dict:
        return {
            "kind": "fixed_set",
            "target_set": list(self.target_set),
            "schema_hash": schema_hash(self.schema),
        }


class Classifier:
    """Deterministic label predictor; order-invariant in acquisitions."""

    def predict_batch(self, values: np.ndarray, acquired: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, state: AcquisitionState) -> int:
        return int(
            self.predict_batch(state.values[None, :], state.acquired[None, :])[0]
        )

    def to_checkpoint(self) -> dict:
        raise NotImplementedError


class MajorityClassifier(Classifier):
    def __init__(self, label: int):
        self.label = int(label)

    def predict_batch(self, values: np.ndarray, acquired: np.ndarray) -> np.ndarray:
        return np.full(values.shape[0], self.label, dtype=int)

    def to_checkpoint(self) -> dict:
        return {"kind": "majority", "label": self.label}


class MeanImputeLogisticClassifier(Classifier):
    """Training-mean imputation of unacquired values, mask-bit augmentation,
    regularized logistic regression."""

    def __init__(self, model: LogisticRegression, means: np.ndarray, schema: SuperfeatureSchema):
        self.model = model
        self.means = np.asarray(means, dtype=float)
        self.schema = schema

    def _encode(self, values: np.ndarray, acquired: np.ndarray) -> np.ndarray:
        imputed = np.where(np.isnan(values), self.means[None, :], values)
        return np.column_stack([imputed, acquired.astype(float)])

    def predict_batch(self, values: np.ndarray, acquired: np.ndarray) -> np.ndarray:
        return self.model.predict(self._encode(values, acquired)).astype(int)

    def to_checkpoint(self) -> dict:
        return {
            "kind": "mean_impute_logistic",
            "coef": self.model.coef_.tolist(),
            "intercept": self.model.intercept_.tolist(),
            "classes": self.model.classes_.tolist(),
            "means": self.means.tolist(),
            "schema_hash": schema_hash(self.schema),
        }

    @classmethod
    def from_checkpoint(cls, ckpt: dict, schema: SuperfeatureSchema) -> "MeanImputeLogisticClassifier":
        model = LogisticRegression()
        model.coef_ = np.array(ckpt["coef"])
        model.intercept_ = np.array(ckpt["intercept"])
        model.classes_ = np.array(ckpt["classes"])
        return cls(model, np.array(ckpt["means"]), schema)


def fit_classifier(
    train: ObservedDataset, subsample_prob: float = 0.5, seed: int = 0
) -> MeanImputeLogisticClassifier:
    """Reference impute-then-regress classifier.

    Trained on the union of the rows as observed and a re-masked copy where
    each observed costly superfeature is retained with probability
    subsample_prob, so the model sees the acquisition patterns it will be
    asked to predict under.
    """
    if train.n == 0:
        raise ValueError("training data is empty")
    if len(np.unique(train.labels)) < 2:
        raise ValueError("training labels contain a single class")
    schema = train.schema
    means = np.nan_to_num(np.nanmean(train.features, axis=0))

    rng = np.random.Generator(np.random.Philox(key=seed))
    keep = rng.random((train.n, schema.d_super)) < subsample_prob
    sub_mask = np.array(train.mask)
    for j in schema.costly:
        sub_mask[:, j] = train.mask[:, j] * keep[:, j]
    sub_values = np.array(train.features)
    for j, sf in enumerate(schema.superfeatures):
        gone = sub_mask[:, j] == 0
        for c in sf.raw_columns:
            sub_values[gone, c] = np.nan

    values = np.vstack([train.features, sub_values])
    acquired = np.vstack([train.mask, sub_mask]).astype(bool)
    labels = np.concatenate([train.labels, train.labels])

    imputed = np.where(np.isnan(values), means[None, :], values)
    X = np.column_stack([imputed, acquired.astype(float)])
    model = LogisticRegression(max_iter=1000)
    model.fit(X, labels)
    return MeanImputeLogisticClassifier(model, means, schema)


class GreedyQPolicy(Policy):
    """Acts greedily (epsilon 0) on per-action cost-to-go regressors."""

    def __init__(
        self,
        models: dict[int, Ridge],
        means: np.ndarray,
        schema: SuperfeatureSchema,
    ):
        self.models = models
        self.means = np.asarray(means, dtype=float)
        self.schema = schema
        self._actions = list(schema.costly) + [STOP]

    def _encode(self, acquired: np.ndarray, values: np.ndarray) -> np.ndarray:
        imputed = np.where(np.isnan(values), self.means, values)
        return np.concatenate([imputed, acquired.astype(float)])[None, :]

    def best_action(self, acquired: np.ndarray, values: np.ndarray) -> int:
        x = self._encode(acquired, values)
        best, best_q = STOP, np.inf
        for a in self._actions:
            if a != STOP and acquired[a]:
                continue
            q = float(self.models[a].predict(x)[0])
            if q < best_q:
                best, best_q = a, q
        return best

    def probabilities(self, acquired: np.ndarray, values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.schema.d_super + 1)
        a = self.best_action(acquired, values)
        out[-1 if a == STOP else a] = 1.0
        return out

    def to_checkpoint(self) -> dict:
        return {
            "kind": "greedy_q",
            "means": self.means.tolist(),
            "models": {
                str(a): {"coef": m.coef_.tolist(), "intercept": float(m.intercept_)}
                for a, m in self.models.items()
            },
            "schema_hash": schema_hash(self.schema),
        }


def fit_greedy_policy(
    sim_data: Sequence[Trajectory],
    costs: CostSpec,
    seed: int,
    data: ObservedDataset,
) -> GreedyQPolicy:
    """Fitted-Q iteration on simulated transitions, minimizing total cost.

    Small ridge regressors, one per action; the returned policy is greedy.
    `data` supplies the revealed feature values for the recorded trajectories.
    """
    if not sim_data:
        raise ValueError("sim_data is empty")
    schema = data.schema
    means = np.nan_to_num(np.nanmean(data.features, axis=0))
    actions = list(schema.costly) + [STOP]

    # Transition table: encoded state, action, immediate cost, next-state fields.
    enc_states, acts, imm, next_idx = [], [], [], []
    next_states: list[tuple[np.ndarray, np.ndarray]] = []
    for traj in sim_data:
        state = initial_state(data.features[traj.row_index], schema)
        acquired = np.array(state.acquired)
        values = np.array(state.values)
        for step in traj.steps:
            imputed = np.where(np.isnan(values), means, values)
            enc_states.append(np.concatenate([imputed, acquired.astype(float)]))
            acts.append(step.action)
            if step.action == STOP:
                imm.append(traj.mc_cost)
                next_idx.append(-1)
            else:
                imm.append(step.acquisition_cost)
                acquired = acquired.copy()
                values = values.copy()
                acquired[step.action] = True
                for c in schema.columns_of(step.action):
                    values[c] = data.features[traj.row_index, c]
                next_states.append((acquired, values))
                next_idx.append(len(next_states) - 1)
    X = np.asarray(enc_states)
    acts_arr = np.asarray(acts)
    imm_arr = np.asarray(imm, dtype=float)
    next_idx = np.asarray(next_idx)

    next_enc = None
    next_allowed = None
    if next_states:
        next_acq = np.array([a for a, _ in next_states])
        next_val = np.array([v for _, v in next_states])
        next_imp = np.where(np.isnan(next_val), means[None, :], next_val)
        next_enc = np.column_stack([next_imp, next_acq.astype(float)])
        next_allowed = {
            a: (~next_acq[:, a] if a != STOP else np.ones(len(next_acq), bool))
            for a in actions
        }

    models = {a: Ridge(alpha=1.0, random_state=seed) for a in actions}
    fitted = False
    for _ in range(len(schema.costly) + 1):
        targets = imm_arr.copy()
        interior = next_idx >= 0
        if fitted and interior.any() and next_enc is not None:
            qmin = np.full(len(next_enc), np.inf)
            for a in actions:
                q = models[a].predict(next_enc)
                allowed = next_allowed[a]
                qmin[allowed] = np.minimum(qmin[allowed], q[allowed])
            targets[interior] += qmin[next_idx[interior]]
        elif interior.any():
            # first sweep: bootstrap from immediate costs only
            pass
        for a in actions:
            sel = acts_arr == a
            if sel.any():
                models[a].fit(X[sel], targets[sel])
            else:
                models[a].fit(X[:1], np.array([costs.c_mc + sum(costs.c_acq)]))
        fitted = True
    return GreedyQPolicy(models, means, schema)


def check_off_policy_support(sim: Policy, target: Policy) -> None:
    """Configuration-time positivity check for the shipped policy classes:
    wherever the target policy puts positive probability, the simulation
    policy must too."""
    if isinstance(sim, SubsetRandomPolicy) and isinstance(target, SubsetRandomPolicy):
        if target.p_acquire > 0 and sim.p_acquire == 0:
            raise ValueError("simulation policy never acquires; target requires acquisitions")
        if target.p_acquire < 1 and sim.p_acquire == 1:
            raise ValueError("simulation policy never stops early; target requires stopping")
        return
    if isinstance(sim, StopPolicy) and not isinstance(target, StopPolicy):
        raise ValueError("stop-only simulation policy cannot cover the target policy")


def policy_from_checkpoint(ckpt: dict, schema: SuperfeatureSchema) -> Policy:
    kind = ckpt["kind"]
    if kind == "subset_random":
        return SubsetRandomPolicy(ckpt["p_acquire"], schema)
    if kind == "stop":
        return StopPolicy(schema)
    if kind == "fixed_set":
        return FixedSetPolicy(ckpt["target_set"], schema)
    if kind == "greedy_q":
        models = {}
        for a_str, m in ckpt["models"].items():
            r = Ridge()
            r.coef_ = np.array(m["coef"])
            r.intercept_ = m["intercept"]
            models[int(a_str)] = r
        return GreedyQPolicy(models, np.array(ckpt["means"]), schema)
    raise ValueError(f"unknown policy checkpoint kind {kind!r}")
