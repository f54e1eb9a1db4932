"""Config-driven experiment pipeline: data → policy → simulation → estimates.

A single JSON config declares the data source, schema, missingness mechanism,
costs, policies, classifier, nuisance settings, estimator list, split
fractions, and seeds. Outputs are plot-ready CSVs plus a diagnostics JSON and
the fully-resolved config; re-running the same config and seeds reproduces
every output file byte-identically.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .core import (
    CostSpec,
    FullDataset,
    ObservedDataset,
    SuperfeatureSchema,
)
from .datagen import (
    MissingnessMechanism,
    apply_missingness,
    generate_synthetic,
    load_csv,
)
from .estimators import (
    RAW,
    SELF_NORMALIZED,
    PointEstimator,
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
    positivity_diagnostics,
)
from .nuisance import (
    PropensityModel,
    fit_propensity_mar,
    fit_propensity_mnar_pattern,
    fit_q_semi,
    ground_truth_propensity,
    zeroed_propensity,
)
from .policy import (
    Classifier,
    MajorityClassifier,
    Policy,
    StopPolicy,
    SubsetRandomPolicy,
    fit_classifier,
)
from .simulate import rollout_ground_truth, rollout_semi_offline

ESTIMATOR_NAMES = (
    "ground-truth",
    "imp-mean",
    "blocking",
    "cc",
    "ipw-miss",
    "ipw-semi",
    "dm-semi",
    "drl-semi",
    "ipw-semi-miss",
)

# estimators whose identification requires observation probabilities that
# depend only on always-observed features
_MAR_ONLY = ("ipw-miss", "ipw-semi", "dm-semi", "drl-semi")


class ConfigError(ValueError):
    """The experiment config is invalid; maps to CLI exit code 2."""


_DEFAULTS: dict[str, Any] = {
    "name": "experiment",
    "targets": ["J_mc"],
    "n_traj_per_row": 1,
    "normalization": SELF_NORMALIZED,
    "bootstrap": {"B": 200, "level": 0.95},
    "splits": {"train": 0.2, "nuisance": 0.4, "test": 0.4},
    "seeds": {
        "data": 1,
        "mask": 2,
        "split": 3,
        "fit": 4,
        "sim": 5,
        "aux": 6,
        "bootstrap": 7,
    },
    "classifier": {"kind": "fitted", "subsample_prob": 0.5},
    "nuisances": {
        "propensity": "ground_truth",
        "conditioning": [],
        "adjustment": [],
        "q_regressor": "mlp",
        "corrupt": None,
    },
    "convergence": True,
}


@dataclasses.dataclass
class ExperimentConfig:
    """Validated experiment description; `raw` keeps the resolved dict for
    provenance output."""

    raw: dict
    schema: SuperfeatureSchema
    costs: CostSpec
    mechanism: MissingnessMechanism | None
    policies: list[dict]
    estimators: list[str]

    @classmethod
    def from_dict(cls, cfg: Mapping) -> "ExperimentConfig":
        merged = _merge(_DEFAULTS, dict(cfg))
        try:
            schema = SuperfeatureSchema.from_dict(merged["schema"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid or missing schema: {exc}") from exc
        try:
            costs = CostSpec.from_schema(schema, float(merged["costs"]["c_mc"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid or missing costs.c_mc: {exc}") from exc

        mechanism = None
        if merged.get("mechanism") is not None:
            try:
                mechanism = MissingnessMechanism.from_dict(merged["mechanism"], schema)
            except Exception as exc:
                raise ConfigError(f"invalid mechanism: {exc}") from exc

        policies = merged.get("policies") or []
        if not policies:
            raise ConfigError("at least one policy is required")
        for p in policies:
            if p.get("kind") not in ("subset_random", "stop"):
                raise ConfigError(f"unknown policy kind {p.get('kind')!r}")
            if "name" not in p:
                raise ConfigError("each policy needs a name")

        estimators = list(merged.get("estimators") or [])
        if not estimators:
            raise ConfigError("at least one estimator is required")
        for e in estimators:
            if e not in ESTIMATOR_NAMES:
                raise ConfigError(
                    f"unknown estimator {e!r}; known: {', '.join(ESTIMATOR_NAMES)}"
                )

        adjustment = list(merged["nuisances"].get("adjustment") or [])
        if mechanism is not None and not mechanism.is_mar and not adjustment:
            offenders = [e for e in estimators if e in _MAR_ONLY]
            if offenders:
                raise ConfigError(
                    f"mechanism is MNAR (observation rules condition on missable "
                    f"features) but {', '.join(offenders)} assume(s) observation "
                    f"probabilities depend only on always-observed features; use "
                    f"'ipw-semi-miss' with nuisances.adjustment set to the "
                    f"conditioning superfeatures"
                )
        if "ipw-semi-miss" in estimators and not adjustment:
            raise ConfigError(
                "ipw-semi-miss requires a non-empty nuisances.adjustment; with no "
                "adjustment set use 'ipw-semi'"
            )

        splits = merged["splits"]
        total = sum(float(splits[k]) for k in ("train", "nuisance", "test"))
        if abs(total - 1.0) > 1e-9:
            raise ConfigError("splits.train + splits.nuisance + splits.test must equal 1")

        data_cfg = merged.get("data") or {}
        if data_cfg.get("kind") not in ("synthetic", "csv"):
            raise ConfigError("data.kind must be 'synthetic' or 'csv'")
        if data_cfg["kind"] == "synthetic" and mechanism is None:
            raise ConfigError("synthetic data requires a mechanism")
        for t in merged["targets"]:
            if t not in ("J_mc", "J_a", "J_total"):
                raise ConfigError(f"unknown target {t!r}")
        if merged["normalization"] not in (RAW, SELF_NORMALIZED):
            raise ConfigError("normalization must be RAW or SELF_NORMALIZED")

        return cls(merged, schema, costs, mechanism, policies, estimators)

    @classmethod
    def from_file(cls, path: str | Path, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        try:
            cfg = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        for item in overrides:
            cfg = apply_override(cfg, item)
        return cls.from_dict(cfg)


def _merge(defaults: Mapping, override: Mapping) -> dict:
    out = dict(defaults)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, item: str) -> dict:
    """Apply one `--set dotted.key=value` override; values parse as JSON with
    a bare-string fallback."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, _, value = item.partition("=")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    parts = key.split(".")
    out = dict(cfg)
    node = out
    for p in parts[:-1]:
        node[p] = dict(node.get(p) or {})
        node = node[p]
    node[parts[-1]] = parsed
    return out


def _fmt(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _make_policy(spec: Mapping, schema: SuperfeatureSchema) -> Policy:
    if spec["kind"] == "subset_random":
        try:
            return SubsetRandomPolicy(float(spec["p_acquire"]), schema)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid subset_random policy: {exc}") from exc
    return StopPolicy(schema)


def _make_classifier(
    cfg: ExperimentConfig, train: ObservedDataset, seed: int
) -> Classifier:
    spec = cfg.raw["classifier"]
    if spec["kind"] == "fitted":
        return fit_classifier(train, float(spec.get("subsample_prob", 0.5)), seed)
    if spec["kind"] == "majority":
        counts = np.bincount(train.labels)
        return MajorityClassifier(int(np.argmax(counts)))
    raise ConfigError(f"unknown classifier kind {spec['kind']!r}")


def _make_propensity(cfg: ExperimentConfig, nuisance_data: ObservedDataset) -> PropensityModel:
    spec = cfg.raw["nuisances"]
    adjustment = [int(j) for j in spec.get("adjustment") or []]
    kind = spec.get("propensity", "ground_truth")
    if kind == "ground_truth":
        if cfg.mechanism is None:
            raise ConfigError("ground_truth propensity requires a mechanism")
        model = ground_truth_propensity(cfg.mechanism)
        if adjustment:
            model = PropensityModel(
                model.factors, model.schema, model.source, frozenset(adjustment)
            )
    elif kind == "fitted":
        if adjustment:
            model = fit_propensity_mnar_pattern(nuisance_data, adjustment)
        else:
            conditioning = [int(j) for j in spec.get("conditioning") or []]
            if not conditioning:
                raise ConfigError(
                    "fitted propensity requires nuisances.conditioning (always-"
                    "observed superfeature indices)"
                )
            model = fit_propensity_mar(nuisance_data, conditioning)
    else:
        raise ConfigError(f"unknown propensity kind {kind!r}")
    if spec.get("corrupt") == "propensity":
        model = zeroed_propensity(model)
    return model


def _load_data(
    cfg: ExperimentConfig,
) -> tuple[ObservedDataset, FullDataset | None]:
    data_cfg = cfg.raw["data"]
    seeds = cfg.raw["seeds"]
    if data_cfg["kind"] == "synthetic":
        n = int(data_cfg["n"])
        d_raw = cfg.schema.d_raw
        if "covariance" in data_cfg:
            cov = np.asarray(data_cfg["covariance"], dtype=float)
        elif "covariance_diag" in data_cfg:
            cov = np.diag(np.asarray(data_cfg["covariance_diag"], dtype=float))
        else:
            cov = np.eye(d_raw)
        try:
            full = generate_synthetic(n, d_raw, cov, int(seeds["data"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        observed = apply_missingness(full, cfg.mechanism, int(seeds["mask"]))
        return observed, full
    path = data_cfg.get("path")
    if not path:
        raise ConfigError("data.kind=csv requires data.path")
    observed = load_csv(
        path,
        cfg.schema,
        data_cfg.get("label_column", "label"),
        data_cfg.get("sentinel_token", "?"),
    )
    return observed, None


def _subset(data: ObservedDataset, idx: np.ndarray) -> ObservedDataset:
    return ObservedDataset(
        data.features[idx], data.mask[idx], data.labels[idx], data.schema, data.meta
    )


def _checkpoints(n: int) -> list[int]:
    """Geometric grid {1, 2, 5} x 10^k up to n, always ending at n."""
    pts = []
    k = 2  # start at 100; smaller prefixes are pure noise
    while True:
        for m in (1, 2, 5):
            v = m * 10**k
            if v >= n:
                return pts + [n]
            pts.append(v)
        k += 1


def run_experiment(
    cfg: ExperimentConfig, output_dir: str | Path, threads: int = 1
) -> Path:
    """Run the full pipeline and write estimates.csv, convergence.csv,
    diagnostics.json, and resolved_config.json into output_dir."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = {k: int(v) for k, v in cfg.raw["seeds"].items()}
    schema, costs = cfg.schema, cfg.costs
    normalization = cfg.raw["normalization"]
    n_traj = int(cfg.raw["n_traj_per_row"])
    boot = cfg.raw["bootstrap"]
    B, level = int(boot["B"]), float(boot["level"])

    observed, full = _load_data(cfg)
    n = observed.n
    rng = np.random.Generator(np.random.Philox(key=seeds["split"]))
    perm = rng.permutation(n)
    n_train = int(round(float(cfg.raw["splits"]["train"]) * n))
    n_nuis = int(round(float(cfg.raw["splits"]["nuisance"]) * n))
    idx_train = np.sort(perm[:n_train])
    idx_nuis = np.sort(perm[n_train : n_train + n_nuis])
    idx_test = np.sort(perm[n_train + n_nuis :])
    train = _subset(observed, idx_train)
    nuis = _subset(observed, idx_nuis)
    test = _subset(observed, idx_test)
    full_test = (
        FullDataset(full.features[idx_test], full.labels[idx_test])
        if full is not None
        else None
    )

    classifier = _make_classifier(cfg, train, seeds["fit"])

    needs_propensity = any(
        e in ("ipw-miss", "ipw-semi", "drl-semi", "ipw-semi-miss")
        for e in cfg.estimators
    )
    propensity = _make_propensity(cfg, nuis) if needs_propensity else None

    estimates_rows: list[dict] = []
    convergence_rows: list[dict] = []
    diagnostics: dict[str, Any] = {
        "n_total": n,
        "n_train": int(len(idx_train)),
        "n_nuisance": int(len(idx_nuis)),
        "n_test": int(len(idx_test)),
        "complete_fraction": float(observed.complete.mean()),
    }

    for pol_spec in cfg.policies:
        pol_name = pol_spec["name"]
        policy = _make_policy(pol_spec, schema)
        trajs = rollout_semi_offline(
            test, policy, classifier, costs, n_traj, seeds["sim"]
        )
        weights = None
        if propensity is not None:
            weights = compute_weight_series(trajs, propensity, test)
            diagnostics[f"positivity/{pol_name}"] = positivity_diagnostics(
                trajs, weights
            )

        q_model = None
        if any(e in ("dm-semi", "drl-semi") for e in cfg.estimators):
            if cfg.raw["nuisances"].get("corrupt") == "q":
                from .nuisance import ZeroQ

                q_model = {t: ZeroQ(schema) for t in cfg.raw["targets"]}
            else:
                nuis_trajs = rollout_semi_offline(
                    nuis, policy, classifier, costs, n_traj, seeds["aux"]
                )
                q_model = {
                    t: fit_q_semi(
                        nuis_trajs,
                        policy,
                        nuis,
                        target=t,
                        seed=seeds["fit"],
                        regressor=cfg.raw["nuisances"].get("q_regressor", "mlp"),
                    )
                    for t in cfg.raw["targets"]
                }

        gt_trajs = None
        if "ground-truth" in cfg.estimators:
            if full_test is None:
                raise ConfigError(
                    "ground-truth estimator requires synthetic data (no "
                    "counterfactual features available from CSV input)"
                )
            gt_trajs = rollout_ground_truth(
                full_test, policy, classifier, costs, schema, n_traj, seeds["sim"]
            )

        for target in cfg.raw["targets"]:
            for name in cfg.estimators:
                est = _build_estimator(
                    name,
                    target,
                    test,
                    trajs,
                    gt_trajs,
                    weights,
                    q_model,
                    policy,
                    classifier,
                    costs,
                    propensity,
                    n_traj,
                    seeds,
                    normalization,
                )
                rep = est.report(B=B, level=level, seed=seeds["bootstrap"])
                d = rep.diagnostics
                estimates_rows.append(
                    {
                        "estimator": name,
                        "policy": pol_name,
                        "target": target,
                        "point": rep.point,
                        "ci_low": rep.ci_low,
                        "ci_high": rep.ci_high,
                        "n_rows": rep.n_rows,
                        "n_traj": rep.n_trajectories,
                        "ess": d.get("ess"),
                        "mean_weight": d.get("mean_weight"),
                        "floored": d.get("floored"),
                        "forced_stop_frac": d.get("forced_stop_frac"),
                    }
                )
                if cfg.raw["convergence"]:
                    for ck in _checkpoints(est.n_rows):
                        prefix = np.arange(ck)
                        pt = est.point(prefix)
                        lo, hi = _prefix_ci(est, ck, B, level, seeds["bootstrap"])
                        convergence_rows.append(
                            {
                                "estimator": name,
                                "policy": pol_name,
                                "target": target,
                                "n": ck,
                                "estimate": pt,
                                "ci_low": lo,
                                "ci_high": hi,
                            }
                        )

    _write_csv(
        out / "estimates.csv",
        [
            "estimator",
            "policy",
            "target",
            "point",
            "ci_low",
            "ci_high",
            "n_rows",
            "n_traj",
            "ess",
            "mean_weight",
            "floored",
            "forced_stop_frac",
        ],
        estimates_rows,
    )
    _write_csv(
        out / "convergence.csv",
        ["estimator", "policy", "target", "n", "estimate", "ci_low", "ci_high"],
        convergence_rows,
    )
    (out / "diagnostics.json").write_text(
        json.dumps(diagnostics, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (out / "resolved_config.json").write_text(
        json.dumps(cfg.raw, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return out


def _prefix_ci(
    est: PointEstimator, k: int, B: int, level: float, seed: int
) -> tuple[float, float]:
    rng = np.random.Generator(np.random.Philox(key=seed))
    values = np.empty(B)
    for b in range(B):
        values[b] = est.point(rng.integers(0, k, k))
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def _build_estimator(
    name: str,
    target: str,
    test: ObservedDataset,
    trajs,
    gt_trajs,
    weights,
    q_model,
    policy,
    classifier,
    costs,
    propensity,
    n_traj: int,
    seeds: dict,
    normalization: str,
) -> PointEstimator:
    if name == "ground-truth":
        return estimate_ground_truth(gt_trajs, target, test.n)
    if name == "blocking":
        return estimate_blocking(trajs, target, test.n)
    if name == "imp-mean":
        return estimate_imp_mean(
            test, policy, classifier, costs, target, n_traj, seeds["aux"] + 1
        )
    if name == "cc":
        return estimate_cc(
            test, policy, classifier, costs, target, n_traj, seeds["aux"] + 2
        )
    if name == "ipw-miss":
        return estimate_ipw_miss(
            test,
            policy,
            classifier,
            costs,
            propensity,
            target,
            n_traj,
            seeds["aux"] + 3,
            normalization,
        )
    if name == "ipw-semi":
        return estimate_ipw_semi(trajs, weights, target, normalization, test.n)
    if name == "ipw-semi-miss":
        return estimate_ipw_semi_miss(trajs, weights, target, normalization, test.n)
    if name == "dm-semi":
        return estimate_dm_semi(q_model[target], test, policy, target)
    if name == "drl-semi":
        return estimate_drl_semi(
            trajs, weights, q_model[target], policy, test, target, normalization, test.n
        )
    raise ConfigError(f"unknown estimator {name!r}")


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
