"""Command-line interface.

Exit codes: 0 success, 2 config error, 3 oracle-suite failure.
The default thread cap comes from the AFAEVAL_THREADS environment variable.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .core import count_trajectories
from .datagen import apply_missingness, dump_csv
from .harness import (
    ConfigError,
    ExperimentConfig,
    _load_data,
    _make_classifier,
    _make_policy,
    _subset,
    run_experiment,
)
from .oracle import run_oracle_suite
from .simulate import dump_trajectories, rollout_semi_offline

THREADS_ENV = "AFAEVAL_THREADS"


def _threads_option(f):
    return click.option(
        "--threads",
        type=int,
        envvar=THREADS_ENV,
        default=1,
        show_default=True,
        help=f"Worker cap (default from ${THREADS_ENV}).",
    )(f)


@click.group()
def main() -> None:
    """Deployment-cost evaluation for feature-acquisition policies."""


def _load_config(config: str, overrides: tuple[str, ...]) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_file(config, overrides)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)


@main.command()
@click.option("--config", required=True, type=click.Path(), help="Experiment config JSON.")
@click.option("--out", required=True, type=click.Path(), help="Output CSV path.")
@click.option("--set", "overrides", multiple=True, help="Override config key: dotted.key=value.")
def generate(config: str, out: str, overrides: tuple[str, ...]) -> None:
    """Generate the configured dataset (features, mask, labels) as CSV."""
    cfg = _load_config(config, overrides)
    try:
        observed, _ = _load_data(cfg)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    dump_csv(observed, out)
    click.echo(f"wrote {observed.n} rows to {out}")


@main.command()
@click.option("--config", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(), help="Trajectory CSV path.")
@click.option("--policy", "policy_name", default=None, help="Policy name from the config (default: first).")
@click.option("--set", "overrides", multiple=True)
@_threads_option
def simulate(config: str, out: str, policy_name: str | None, overrides: tuple[str, ...], threads: int) -> None:
    """Simulate blocked trajectories on the configured test split."""
    cfg = _load_config(config, overrides)
    specs = [p for p in cfg.policies if policy_name in (None, p["name"])]
    if not specs:
        click.echo(f"config error: no policy named {policy_name!r}", err=True)
        sys.exit(2)
    try:
        observed, _ = _load_data(cfg)
        import numpy as np

        seeds = {k: int(v) for k, v in cfg.raw["seeds"].items()}
        rng = np.random.Generator(np.random.Philox(key=seeds["split"]))
        perm = rng.permutation(observed.n)
        n_train = int(round(float(cfg.raw["splits"]["train"]) * observed.n))
        n_nuis = int(round(float(cfg.raw["splits"]["nuisance"]) * observed.n))
        train = _subset(observed, np.sort(perm[:n_train]))
        test = _subset(observed, np.sort(perm[n_train + n_nuis :]))
        classifier = _make_classifier(cfg, train, seeds["fit"])
        policy = _make_policy(specs[0], cfg.schema)
        trajs = rollout_semi_offline(
            test, policy, classifier, cfg.costs, int(cfg.raw["n_traj_per_row"]), seeds["sim"]
        )
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    dump_trajectories(trajs, out)
    click.echo(f"wrote {len(trajs)} trajectories to {out}")


@main.command()
@click.option("--config", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--set", "overrides", multiple=True)
@_threads_option
def estimate(config: str, out: str, overrides: tuple[str, ...], threads: int) -> None:
    """Run the pipeline and write the estimates CSV (no convergence curves)."""
    cfg = _load_config(config, (*overrides, "convergence=false"))
    try:
        run_experiment(cfg, out, threads)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    click.echo((Path(out) / "estimates.csv").read_text(), nl=False)


@main.command()
@click.option("--config", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--set", "overrides", multiple=True)
@_threads_option
def experiment(config: str, out: str, overrides: tuple[str, ...], threads: int) -> None:
    """Run the full experiment: estimates, convergence curves, diagnostics."""
    cfg = _load_config(config, overrides)
    try:
        run_experiment(cfg, out, threads)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"experiment artifacts written to {out}")


@main.command()
@click.option("--n", default=200_000, show_default=True, help="Sampled rows for the statistical checks.")
@click.option("--seed", default=0, show_default=True)
@click.option("--p-acquire", default=0.5, show_default=True)
@click.option(
    "--corrupt",
    type=click.Choice(["propensity", "q"]),
    default=None,
    help="Run the double-robustness variant with the given nuisance corrupted.",
)
@click.option("--json", "as_json", is_flag=True, help="Emit the full report as JSON.")
def oracle(n: int, seed: int, p_acquire: float, corrupt: str | None, as_json: bool) -> None:
    """Check all estimators against the exact-enumeration environment."""
    report = run_oracle_suite(n, seed, p_acquire, corrupt)
    if as_json:
        click.echo(json.dumps(report, sort_keys=True, indent=2))
    else:
        for c in report["checks"]:
            status = "PASS" if c["passed"] else "FAIL"
            click.echo(f"[{status}] {c['name']}: {c['detail']}")
        click.echo(
            f"overall: {'PASS' if report['passed'] else 'FAIL'} "
            f"({report['values']['elapsed_seconds']:.1f}s)"
        )
    if not report["passed"]:
        sys.exit(3)


@main.command("count-traj")
@click.argument("m", type=int)
def count_traj(m: int) -> None:
    """Number of distinct acquisition trajectories over M costly features."""
    try:
        click.echo(str(count_trajectories(m)))
    except (ValueError, OverflowError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
