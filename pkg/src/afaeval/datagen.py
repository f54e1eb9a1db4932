"""Synthetic data generation, missingness induction, and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    FullDataset,
    ObservedDataset,
    SchemaError,
    SuperfeatureSchema,
    masked_features,
)


class MechanismError(ValueError):
    pass


@dataclass(frozen=True)
class AlwaysObserved:
    kind: str = field(default="always", init=False)

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        return np.ones(features.shape[0])

    @property
    def conditioning_columns(self) -> tuple[int, ...]:
        return ()


@dataclass(frozen=True)
class ConstantRate:
    p: float
    kind: str = field(default="constant", init=False)

    def __post_init__(self) -> None:
        if not 0 < self.p <= 1:
            raise MechanismError("constant observation rate must be in (0, 1]")

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        return np.full(features.shape[0], self.p)

    @property
    def conditioning_columns(self) -> tuple[int, ...]:
        return ()


@dataclass(frozen=True)
class LogisticRate:
    """P(observed) = sigmoid(intercept + sum coef_c * X_c)."""

    intercept: float
    coefficients: Mapping[int, float]
    kind: str = field(default="logistic", init=False)

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        z = np.full(features.shape[0], self.intercept, dtype=float)
        for col, coef in self.coefficients.items():
            z += coef * features[:, col]
        return 1.0 / (1.0 + np.exp(-z))

    @property
    def conditioning_columns(self) -> tuple[int, ...]:
        return tuple(sorted(self.coefficients))


Rule = AlwaysObserved | ConstantRate | LogisticRate


@dataclass(frozen=True)
class MissingnessMechanism:
    """Per-superfeature observation rules, aligned with the schema."""

    rules: tuple[Rule, ...]
    schema: SuperfeatureSchema

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(self.rules))
        if len(self.rules) != self.schema.d_super:
            raise MechanismError("one rule per superfeature required")
        for j in self.schema.free_set:
            if not isinstance(self.rules[j], AlwaysObserved):
                raise MechanismError(f"free superfeature {j} must use an ALWAYS rule")

    @property
    def always_observed(self) -> frozenset[int]:
        return frozenset(j for j, r in enumerate(self.rules) if isinstance(r, AlwaysObserved))

    def mnar_superfeatures(self) -> frozenset[int]:
        """Superfeatures whose rule conditions on a column that can itself be missing."""
        owner = self.schema.column_owner()
        always = self.always_observed
        flagged = set()
        for j, rule in enumerate(self.rules):
            for col in rule.conditioning_columns:
                if owner[col] not in always:
                    flagged.add(j)
        return frozenset(flagged)

    @property
    def is_mar(self) -> bool:
        return not self.mnar_superfeatures()

    def mask_probabilities(self, features: np.ndarray) -> np.ndarray:
        """(n, d_super) matrix of P(R_j = 1 | row). Requires full features."""
        return np.column_stack([rule.probabilities(features) for rule in self.rules])

    def to_dict(self) -> list[dict]:
        out = []
        for rule in self.rules:
            if isinstance(rule, AlwaysObserved):
                out.append({"kind": "always"})
            elif isinstance(rule, ConstantRate):
                out.append({"kind": "constant", "p": rule.p})
            else:
                out.append(
                    {
                        "kind": "logistic",
                        "intercept": rule.intercept,
                        "coefficients": {str(c): v for c, v in rule.coefficients.items()},
                    }
                )
        return out

    @classmethod
    def from_dict(cls, spec: Sequence[Mapping], schema: SuperfeatureSchema) -> "MissingnessMechanism":
        rules: list[Rule] = []
        for item in spec:
            kind = item["kind"]
            if kind == "always":
                rules.append(AlwaysObserved())
            elif kind == "constant":
                rules.append(ConstantRate(float(item["p"])))
            elif kind == "logistic":
                rules.append(
                    LogisticRate(
                        float(item["intercept"]),
                        {int(c): float(v) for c, v in item["coefficients"].items()},
                    )
                )
            else:
                raise MechanismError(f"unknown rule kind {kind!r}")
        return cls(tuple(rules), schema)


def generate_synthetic(
    n: int, d_raw: int, covariance: np.ndarray, seed: int
) -> FullDataset:
    """Zero-mean multivariate-normal features; labels are 1 with probability 1
    when the feature sum is positive and 0.3 otherwise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    covariance = np.asarray(covariance, dtype=float)
    if covariance.shape != (d_raw, d_raw):
        raise ValueError("covariance shape must be (d_raw, d_raw)")
    try:
        chol = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance must be positive definite") from exc
    rng = np.random.Generator(np.random.Philox(key=seed))
    features = rng.standard_normal((n, d_raw)) @ chol.T
    p1 = np.where(features.sum(axis=1) > 0, 1.0, 0.3)
    labels = (rng.random(n) < p1).astype(int)
    return FullDataset(features, labels)


def label_probability(feature_sum: np.ndarray) -> np.ndarray:
    """P(Y=1) under the synthetic label rule, exposed for oracle tests."""
    return np.where(np.asarray(feature_sum) > 0, 1.0, 0.3)


def apply_missingness(
    full: FullDataset,
    mech: MissingnessMechanism,
    seed: int,
    row_keys: np.ndarray | None = None,
) -> ObservedDataset:
    """Sample a mask row-independently and blank out unobserved superfeatures.

    Uniform draws are keyed positionally by `row_keys` (default: row index), so
    masking a row depends only on (seed, row key, row content).
    """
    schema = mech.schema
    n = full.n
    if row_keys is None:
        row_keys = np.arange(n)
    row_keys = np.asarray(row_keys, dtype=int)
    probs = mech.mask_probabilities(full.features)
    if np.any(probs <= 0) or np.any(probs > 1):
        raise MechanismError("rule probabilities must lie in (0, 1]")

    owner = schema.column_owner()
    always = mech.always_observed
    for j, rule in enumerate(mech.rules):
        if mech.is_mar:
            for col in rule.conditioning_columns:
                if owner[col] not in always:
                    raise MechanismError(
                        f"rule for superfeature {j} conditions on a missable column"
                    )

    rng = np.random.Generator(np.random.Philox(key=seed))
    table = rng.random((int(row_keys.max()) + 1, schema.d_super))
    u = table[row_keys]
    mask = (u < probs).astype(np.int8)
    for j, rule in enumerate(mech.rules):
        if isinstance(rule, AlwaysObserved):
            mask[:, j] = 1

    meta = {}
    flagged = mech.mnar_superfeatures()
    if flagged:
        meta["mnar_conditioning"] = sorted(flagged)
    feats = masked_features(full, mask, schema)
    return ObservedDataset(feats, mask, full.labels, schema, meta)


def load_csv(
    path: str | Path,
    schema: SuperfeatureSchema,
    label_column: str,
    sentinel_token: str = "?",
) -> ObservedDataset:
    """Read an observed dataset; cells equal to the sentinel become missing.

    A superfeature must be missing or observed as a whole per row; partial
    observation is an error.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if label_column not in header:
        raise SchemaError(f"label column {label_column!r} not found in header")
    label_idx = header.index(label_column)
    feature_cols = [
        i
        for i in range(len(header))
        if i != label_idx and not header[i].startswith("mask_")
    ]
    if len(feature_cols) != schema.d_raw:
        raise SchemaError(
            f"CSV has {len(feature_cols)} feature columns, schema expects {schema.d_raw}"
        )

    n = len(rows)
    feats = np.full((n, schema.d_raw), np.nan)
    mask = np.zeros((n, schema.d_super), dtype=np.int8)
    raw_labels = []
    for i, row in enumerate(rows):
        raw_labels.append(row[label_idx])
        cells = [row[c] for c in feature_cols]
        for j, sf in enumerate(schema.superfeatures):
            values = [cells[c] for c in sf.raw_columns]
            missing = [v.strip() == sentinel_token for v in values]
            if any(missing) and not all(missing):
                raise SchemaError(
                    f"row {i}: superfeature {sf.name!r} is partially observed"
                )
            if all(missing):
                if j in schema.free_set:
                    raise SchemaError(f"row {i}: free superfeature {sf.name!r} missing")
                continue
            mask[i, j] = 1
            for c, v in zip(sf.raw_columns, values):
                try:
                    feats[i, c] = float(v)
                except ValueError as exc:
                    raise SchemaError(
                        f"row {i}, column {header[feature_cols[c]]!r}: unparseable number {v!r}"
                    ) from exc

    try:
        labels = np.array([int(v) for v in raw_labels])
    except ValueError:
        codes = {v: k for k, v in enumerate(sorted(set(raw_labels)))}
        labels = np.array([codes[v] for v in raw_labels])
    return ObservedDataset(feats, mask, labels, schema)


def dump_csv(data: ObservedDataset, path: str | Path, sentinel_token: str = "?") -> None:
    """Write features, one mask_<superfeature> column per superfeature, and label."""
    schema = data.schema
    path = Path(path)
    col_names = [f"x{c}" for c in range(schema.d_raw)]
    header = col_names + [f"mask_{sf.name}" for sf in schema.superfeatures] + ["label"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            cells = [
                sentinel_token if np.isnan(v) else repr(float(v))
                for v in data.features[i]
            ]
            cells += [str(int(b)) for b in data.mask[i]]
            cells.append(str(int(data.labels[i])))
            writer.writerow(cells)
