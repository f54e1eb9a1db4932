"""Shared domain types for acquisition-policy cost evaluation.

Everything in this module is immutable after construction and safe to share
across threads. Missing values are represented by NaN in the feature arrays,
but the binary mask is the authority: serialization and all logic go through
the mask, never through sentinel comparisons on data values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

# Action index for "stop & predict". Acquisition actions are superfeature
# indices 0..d_super-1; distributions place STOP at the last slot.
STOP = -1


class SchemaError(ValueError):
    """Raised when a schema or dataset violates a structural invariant."""


@dataclass(frozen=True)
class Superfeature:
    name: str
    raw_columns: tuple[int, ...]
    cost: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "raw_columns", tuple(int(c) for c in self.raw_columns))
        if not self.raw_columns:
            raise SchemaError(f"superfeature {self.name!r} has no raw columns")
        if self.cost < 0:
            raise SchemaError(f"superfeature {self.name!r} has negative cost")


@dataclass(frozen=True)
class SuperfeatureSchema:
    """Groups raw feature columns into jointly-acquired superfeatures.

    Superfeatures with cost 0 form the free set: they are revealed at step 0
    and are never acquisition actions.
    """

    superfeatures: tuple[Superfeature, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "superfeatures", tuple(self.superfeatures))
        cols: list[int] = []
        for sf in self.superfeatures:
            cols.extend(sf.raw_columns)
        if sorted(cols) != list(range(len(cols))):
            raise SchemaError("raw_columns must partition 0..d_raw-1 with no overlap")
        object.__setattr__(self, "_d_super", len(self.superfeatures))
        object.__setattr__(self, "_d_raw", len(cols))
        object.__setattr__(
            self,
            "_free_set",
            frozenset(i for i, sf in enumerate(self.superfeatures) if sf.cost == 0),
        )
        object.__setattr__(
            self,
            "_costly",
            tuple(i for i, sf in enumerate(self.superfeatures) if sf.cost > 0),
        )

    @property
    def d_super(self) -> int:
        return self._d_super

    @property
    def d_raw(self) -> int:
        return self._d_raw

    @property
    def free_set(self) -> frozenset[int]:
        return self._free_set

    @property
    def costly(self) -> tuple[int, ...]:
        return self._costly

    @property
    def costs(self) -> np.ndarray:
        return np.array([sf.cost for sf in self.superfeatures], dtype=float)

    def columns_of(self, j: int) -> tuple[int, ...]:
        return self.superfeatures[j].raw_columns

    def column_owner(self) -> np.ndarray:
        """Map raw column index -> owning superfeature index."""
        owner = np.empty(self.d_raw, dtype=int)
        for j, sf in enumerate(self.superfeatures):
            for c in sf.raw_columns:
                owner[c] = j
        return owner

    def to_dict(self) -> list[dict]:
        return [
            {"name": sf.name, "raw_columns": list(sf.raw_columns), "cost": sf.cost}
            for sf in self.superfeatures
        ]

    @classmethod
    def from_dict(cls, spec: Sequence[Mapping]) -> "SuperfeatureSchema":
        return cls(tuple(Superfeature(s["name"], tuple(s["raw_columns"]), float(s["cost"])) for s in spec))


@dataclass(frozen=True)
class CostSpec:
    """Per-superfeature acquisition costs plus a scalar misclassification cost."""

    c_acq: tuple[float, ...]
    c_mc: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "c_acq", tuple(float(c) for c in self.c_acq))
        if self.c_mc <= 0:
            raise SchemaError("c_mc must be positive")
        if any(c < 0 for c in self.c_acq):
            raise SchemaError("acquisition costs must be nonnegative")

    @classmethod
    def from_schema(cls, schema: SuperfeatureSchema, c_mc: float) -> "CostSpec":
        return cls(tuple(sf.cost for sf in schema.superfeatures), c_mc)

    def validate_against(self, schema: SuperfeatureSchema) -> None:
        if len(self.c_acq) != schema.d_super:
            raise SchemaError("c_acq length does not match schema")
        for i, c in enumerate(self.c_acq):
            if (c == 0) != (i in schema.free_set):
                raise SchemaError(f"c_acq[{i}] = {c} inconsistent with free set")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FullDataset:
    """Counterfactual feature matrix with no missingness."""

    features: np.ndarray  # (n, d_raw) float
    labels: np.ndarray  # (n,) int

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", _freeze(np.asarray(self.features, dtype=float)))
        object.__setattr__(self, "labels", _freeze(np.asarray(self.labels, dtype=int)))
        if not np.all(np.isfinite(self.features)):
            raise SchemaError("FullDataset features must be finite (no sentinels)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise SchemaError("features/labels row mismatch")

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ObservedDataset:
    """Retrospective data: features with NaN where unobserved, mask as authority."""

    features: np.ndarray  # (n, d_raw) float with NaN for unobserved
    mask: np.ndarray  # (n, d_super) {0,1}
    labels: np.ndarray  # (n,) int
    schema: SuperfeatureSchema
    meta: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", _freeze(np.asarray(self.features, dtype=float)))
        object.__setattr__(self, "mask", _freeze(np.asarray(self.mask, dtype=np.int8)))
        object.__setattr__(self, "labels", _freeze(np.asarray(self.labels, dtype=int)))
        if self.features.shape != (self.labels.shape[0], self.schema.d_raw):
            raise SchemaError("features shape does not match schema/labels")
        if self.mask.shape != (self.labels.shape[0], self.schema.d_super):
            raise SchemaError("mask shape does not match schema/labels")
        for j in self.schema.free_set:
            if not np.all(self.mask[:, j] == 1):
                raise SchemaError(f"free superfeature {j} must be observed in every row")
        for j, sf in enumerate(self.schema.superfeatures):
            cols = list(sf.raw_columns)
            observed = self.mask[:, j].astype(bool)
            if np.isnan(self.features[observed][:, cols]).any():
                raise SchemaError(f"superfeature {j} marked observed but contains NaN")
            if not np.all(np.isnan(self.features[~observed][:, cols])):
                raise SchemaError(f"superfeature {j} marked missing but contains values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def complete(self) -> np.ndarray:
        """Boolean row selector for complete cases (mask all ones)."""
        return self.mask.all(axis=1)


def masked_features(full: FullDataset, mask: np.ndarray, schema: SuperfeatureSchema) -> np.ndarray:
    """Copy full features, writing NaN into columns of unobserved superfeatures."""
    feats = np.array(full.features, dtype=float)
    for j, sf in enumerate(schema.superfeatures):
        unobserved = ~np.asarray(mask)[:, j].astype(bool)
        for c in sf.raw_columns:
            feats[unobserved, c] = np.nan
    return feats


@dataclass(frozen=True)
class AcquisitionState:
    """One point of the acquisition process: which superfeatures are revealed.

    `step` counts costly acquisitions only; the free set is revealed at step 0.
    """

    acquired: np.ndarray  # (d_super,) bool
    values: np.ndarray  # (d_raw,) float with NaN for unacquired
    step: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "acquired", _freeze(np.asarray(self.acquired, dtype=bool)))
        object.__setattr__(self, "values", _freeze(np.asarray(self.values, dtype=float)))


def initial_state(values_row: np.ndarray, schema: SuperfeatureSchema) -> AcquisitionState:
    """State at step 0: free superfeatures revealed, everything else hidden."""
    acquired = np.zeros(schema.d_super, dtype=bool)
    vals = np.full(schema.d_raw, np.nan)
    for j in schema.free_set:
        acquired[j] = True
        for c in schema.columns_of(j):
            vals[c] = values_row[c]
    return AcquisitionState(acquired, vals, 0)


@dataclass(frozen=True)
class TrajectoryStep:
    action: int  # superfeature index or STOP
    p_alpha: float  # target-policy probability of the action (unblocked)
    p_sim: float  # sampling probability (blocked policy)
    acquisition_cost: float


@dataclass(frozen=True)
class Trajectory:
    row_index: int
    steps: tuple[TrajectoryStep, ...]
    prediction: int
    mc_cost: float
    forced_stop: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def acquisition_cost(self) -> float:
        return sum(s.acquisition_cost for s in self.steps)

    @property
    def total_cost(self) -> float:
        return self.acquisition_cost + self.mc_cost

    def cost_for(self, target: str) -> float:
        if target == "J_mc":
            return self.mc_cost
        if target == "J_a":
            return self.acquisition_cost
        if target == "J_total":
            return self.total_cost
        raise ValueError(f"unknown target {target!r}")


TARGETS = ("J_mc", "J_a", "J_total")


@dataclass(frozen=True)
class EstimateReport:
    estimator: str
    target: str
    point: float
    ci_low: float | None
    ci_high: float | None
    n_rows: int
    n_trajectories: int
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.ci_low is not None and self.ci_high is not None:
            if not (self.ci_low <= self.point <= self.ci_high):
                raise ValueError(
                    f"{self.estimator}: point {self.point} outside CI [{self.ci_low}, {self.ci_high}]"
                )

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "target": self.target,
            "point": self.point,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_rows": self.n_rows,
            "n_trajectories": self.n_trajectories,
            "diagnostics": dict(self.diagnostics),
        }


_MAX_TRAJ_M = 10_000


def count_trajectories(m: int) -> int:
    """Number of ordered acquisition sequences over m available features.

    Counts every way to pick an ordered subset (including the empty one):
    sum over i of m!/(m-i)!. Exact integer arithmetic.
    """
    if m < 0:
        raise ValueError("m must be nonnegative")
    if m > _MAX_TRAJ_M:
        raise OverflowError(f"m = {m} exceeds supported range ({_MAX_TRAJ_M})")
    total = 0
    fact_m = math.factorial(m)
    for i in range(m + 1):
        total += fact_m // math.factorial(m - i)
    return total
