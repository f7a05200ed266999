"""Experiment orchestration: run configured suites, persist series and
reports, summarize results.

Subcommands:
    simulate  -- run the model, emit series/checkpoint CSVs and a manifest
    verify    -- run the model plus its statistical battery; report file
    sweep     -- grid over r or p, one output cell per value
    table     -- render existing report files as a human-readable table

Exit codes: 0 all mandatory tests pass, 1 test failure, 2 config error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bernoulli import (
    BernoulliMarket,
    lambda_mean_closed_form,
    simulate_equilibrium,
)
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config, validate
from .general import (
    GeneralMarket,
    exact_bridge_samples,
    lambda_limit,
    simulate_general_equilibrium,
    unconditional_variance,
)
from .ou import OUParams
from .payoff import resolve_payoff
from .sde import DivergenceBudgetError, SimConfig
from .verify import (
    StatReport,
    announcement_sim,
    bernoulli_profit_optimality,
    calibration_test,
    d_invariance_test,
    jump_at_announcement,
    ks_two_sample,
    martingale_test,
    normality_test,
    supermartingale_test,
)

SERIES_HEADER = "t,mean_P,se_P,mean_lambda,se_lambda,mean_absPgapGamma,qv_X_mean"


@dataclass
class RunManifest:
    config: dict
    version: str
    timestamp: str
    files: list  # [{"name":..., "sha256":...}]

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "version": self.version,
                "timestamp": self.timestamp,
                "files": self.files,
            },
            indent=2,
            sort_keys=True,
        )


def _fmt(x: float) -> str:
    """12 significant digits, decimal (positional) notation."""
    if not np.isfinite(x):
        return "nan"
    return np.format_float_positional(
        float(x), precision=12, unique=False, fractional=False, trim="k"
    )


def _mean_se(col: np.ndarray) -> tuple[float, float]:
    n = col.size
    return float(col.mean()), float(col.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def series_rows(run) -> list[dict]:
    """Per-checkpoint aggregates of a simulated bundle."""
    rows = []
    keep = ~run.diverged
    for j, t in enumerate(run.times):
        mean_p, se_p = _mean_se(run.P[keep, j])
        mean_l, se_l = _mean_se(run.lam[keep, j])
        gap = float(np.abs(run.P[keep, j] - run.gamma[keep]).mean())
        rows.append(
            {
                "t": float(t),
                "mean_P": mean_p,
                "se_P": se_p,
                "mean_lambda": mean_l,
                "se_lambda": se_l,
                "mean_absPgapGamma": gap,
                "qv_X_mean": float(run.qv_X[keep, j].mean()),
            }
        )
    return rows


def write_series_csv(rows: list[dict], path: Path) -> None:
    lines = [SERIES_HEADER]
    for row in rows:
        lines.append(",".join(_fmt(row[k]) for k in SERIES_HEADER.split(",")))
    path.write_text("\n".join(lines) + "\n")


def write_checkpoints_csv(run, path: Path) -> None:
    """Per-path terminal snapshot (last report time)."""
    cols = ["path", "gamma", "tau", "Y_end", "X_end", "P_end", "lambda_end", "qv_X"]
    has_profit = getattr(run, "profit_disc", None) is not None
    if has_profit:
        cols += ["profit_disc", "profit_tau"]
    lines = [",".join(cols)]
    for i in range(run.n_paths):
        vals = [
            str(i),
            _fmt(run.gamma[i]),
            _fmt(run.tau[i]),
            _fmt(run.Y[i, -1]),
            _fmt(run.X[i, -1]),
            _fmt(run.P[i, -1]),
            _fmt(run.lam[i, -1]),
            _fmt(run.qv_X[i, -1]),
        ]
        if has_profit:
            vals += [_fmt(run.profit_disc[i]), _fmt(run.profit_tau[i])]
        lines.append(",".join(vals))
    path.write_text("\n".join(lines) + "\n")


def write_report(reports: list[StatReport], path: Path) -> None:
    """Machine-diffable report: one blank-line-separated record per test."""
    records = []
    for rep in reports:
        rec = [
            f"test: {rep.name}",
            f"estimate: {_fmt(rep.estimate)}",
            f"std_error: {_fmt(rep.std_error)}",
            f"statistic: {_fmt(rep.statistic)}",
            f"threshold: {_fmt(rep.threshold)}",
            f"passed: {'true' if rep.passed else 'false'}",
            f"n_paths: {rep.n_paths}",
        ]
        if rep.checkpoints:
            rec.append("checkpoints: " + ",".join(_fmt(t) for t in rep.checkpoints))
        records.append("\n".join(rec))
    path.write_text("\n\n".join(records) + "\n")


def read_report(path: Path) -> list[StatReport]:
    reports = []
    for chunk in path.read_text().strip().split("\n\n"):
        fields = dict(line.split(": ", 1) for line in chunk.splitlines() if ": " in line)
        if "test" not in fields:
            continue
        reports.append(
            StatReport(
                name=fields["test"],
                estimate=float(fields.get("estimate", "nan")),
                std_error=float(fields.get("std_error", "nan")),
                statistic=float(fields.get("statistic", "nan")),
                threshold=float(fields.get("threshold", "nan")),
                passed=fields.get("passed") == "true",
                n_paths=int(fields.get("n_paths", 0)),
                checkpoints=tuple(
                    float(x) for x in fields.get("checkpoints", "").split(",") if x
                ),
            )
        )
    return reports


def summarize(reports: list[StatReport]) -> str:
    """Human-readable table, one row per test."""
    if not reports:
        raise ValueError("no reports to summarize")
    header = f"{'test':<40s} {'estimate':>14s} {'std_err':>10s} {'stat':>10s} {'thr':>10s}  result"
    rows = [header, "-" * len(header)]
    for rep in reports:
        rows.append(
            f"{rep.name:<40s} {rep.estimate:>14.6g} {rep.std_error:>10.3g} "
            f"{rep.statistic:>10.4g} {rep.threshold:>10.4g}  "
            f"{'PASS' if rep.passed else 'FAIL'}"
        )
    n_fail = sum(not r.passed for r in reports)
    rows.append(f"{len(reports)} tests, {n_fail} failed")
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def _sim_config(config: ExperimentConfig) -> SimConfig:
    return SimConfig(
        t_end=config.t_end,
        dt=config.dt,
        n_paths=config.n_paths,
        seed=config.seed,
        checkpoints=tuple(config.checkpoints),
        block_paths=config.block_paths,
    )


def bernoulli_suite(config: ExperimentConfig, verify: bool):
    market = BernoulliMarket(p=config.p, params=OUParams(r=config.r, d=config.d))
    sim = _sim_config(config)
    run = simulate_equilibrium(market, None, sim)
    reports: list[StatReport] = []
    if not verify:
        return run, reports

    times = run.times
    keep = ~run.diverged
    reports.append(
        martingale_test(
            run.P[keep], times, expected_mean=market.p, name="bernoulli_P_martingale"
        )
    )

    # Price impact: bands against the Gaussian closed form, then monotone decay.
    canonical = BernoulliMarket(p=config.p, params=OUParams(r=config.r, d=0.0))
    z_lam = []
    for j, t in enumerate(times):
        target = lambda_mean_closed_form(t, canonical)
        mean, se = _mean_se(run.lam[keep, j])
        z_lam.append((mean - target) / se if se > 0 else 0.0)
    stat = float(np.max(np.abs(z_lam)))
    reports.append(
        StatReport(
            name="bernoulli_lambda_closed_form",
            estimate=float(run.lam[keep, -1].mean()),
            std_error=_mean_se(run.lam[keep, -1])[1],
            statistic=stat,
            threshold=3.0,
            passed=stat <= 3.0,
            n_paths=int(keep.sum()),
            checkpoints=tuple(times),
        )
    )
    reports.append(
        supermartingale_test(run.lam[keep], times, name="bernoulli_lambda_potential")
    )

    gaps = np.abs(run.P[keep] - run.gamma[keep, None]).mean(axis=0)
    decreasing = bool(np.all(np.diff(gaps) <= 1e-12))
    enforce_level = config.r * config.t_end >= 8.0 - 1e-9
    final_ok = gaps[-1] <= 0.05 if enforce_level else True
    reports.append(
        StatReport(
            name="bernoulli_convergence",
            estimate=float(gaps[-1]),
            std_error=0.0,
            statistic=float(gaps[-1]),
            threshold=0.05 if enforce_level else float("inf"),
            passed=decreasing and final_ok,
            n_paths=int(keep.sum()),
            checkpoints=tuple(times),
            details={"gaps": gaps.tolist()},
        )
    )

    t_end = times[-1]
    reports.append(
        normality_test(
            run.X[keep, -1] / np.sqrt(t_end), name="bernoulli_X_normality"
        )
    )
    qv_mean = float(run.qv_X[keep, -1].mean())
    qv_ok = abs(qv_mean - t_end) <= 0.05 * t_end
    reports.append(
        StatReport(
            name="bernoulli_X_qv",
            estimate=qv_mean,
            std_error=_mean_se(run.qv_X[keep, -1])[1],
            statistic=abs(qv_mean - t_end) / t_end,
            threshold=0.05,
            passed=qv_ok,
            n_paths=int(keep.sum()),
        )
    )

    mid = len(times) // 2
    reports.append(
        calibration_test(
            run.P[keep, mid], run.gamma[keep], name=f"bernoulli_calibration_t{times[mid]:g}"
        )
    )

    opt_report, estimates = bernoulli_profit_optimality(
        market, config.deviation_factors, sim
    )
    reports.append(opt_report)
    cand = estimates[1.0]
    diff = abs(cand.disc_mean - cand.tau_mean)
    thr = 3.0 * cand.combined_se()
    reports.append(
        StatReport(
            name="bernoulli_profit_estimators",
            estimate=cand.disc_mean - cand.tau_mean,
            std_error=cand.combined_se(),
            statistic=diff / cand.combined_se() if cand.combined_se() > 0 else 0.0,
            threshold=3.0,
            passed=diff <= thr,
            n_paths=cand.n_paths,
        )
    )

    _, ann_reports = announcement_sim(run)
    reports.extend(ann_reports)
    reports.append(jump_at_announcement(run))

    small = SimConfig(
        t_end=config.t_end,
        dt=config.dt,
        n_paths=min(config.n_paths, 256),
        seed=config.seed,
        checkpoints=tuple(config.checkpoints),
        block_paths=config.block_paths,
    )
    reports.append(d_invariance_test(config.p, config.r, (config.d, config.d + 1.0), small))
    return run, reports


def general_suite(config: ExperimentConfig, verify: bool):
    payoff = resolve_payoff(config.payoff)
    market = GeneralMarket(r=config.r, payoff=payoff)
    sim = _sim_config(config)
    run = simulate_general_equilibrium(market, sim)
    reports: list[StatReport] = []
    if not verify:
        return run, reports

    times = run.times
    keep = ~run.diverged
    h0 = float(np.mean(run.P[keep, 0])) if times[0] == 0 else None
    reports.append(
        martingale_test(run.P[keep], times, expected_mean=h0, name="general_P_martingale")
    )

    reports.append(
        supermartingale_test(run.lam[keep], times, name="general_lambda_supermartingale")
    )
    limit = lambda_limit(market)
    mean_l, se_l = _mean_se(run.lam[keep, -1])
    z = abs(mean_l - limit) / se_l if se_l > 0 else 0.0
    reports.append(
        StatReport(
            name="general_lambda_limit",
            estimate=mean_l,
            std_error=se_l,
            statistic=z,
            threshold=3.0,
            passed=z <= 3.0,
            n_paths=int(keep.sum()),
            details={"limit": limit},
        )
    )

    for j, t in enumerate(times):
        var = unconditional_variance(t, config.r)
        reports.append(
            normality_test(
                run.Y[keep, j], scale=np.sqrt(var), name=f"general_ownlaw_ks_t{t:g}"
            )
        )

    # Bridge pinned at z = 0.5 against the exact sampler.
    v_pin = float(payoff.f(0.5))
    bridge = simulate_general_equilibrium(market, sim, v=v_pin)
    z_pin = float(payoff.f_inv(v_pin))
    exact = exact_bridge_samples(market, np.full(sim.n_paths, z_pin), times, sim.n_paths, sim.seed)
    bkeep = ~bridge.diverged
    for j, t in enumerate(times[:-1]):
        reports.append(
            ks_two_sample(
                bridge.Y[bkeep, j], exact[bkeep, j], name=f"general_bridge_ks_t{t:g}"
            )
        )
    gap = float(np.abs(bridge.Y[bkeep, -1] - z_pin).mean())
    enforce_level = config.r * config.t_end >= 8.0 - 1e-9
    reports.append(
        StatReport(
            name="general_bridge_convergence",
            estimate=gap,
            std_error=0.0,
            statistic=gap,
            threshold=0.05 if enforce_level else float("inf"),
            passed=gap <= 0.05 if enforce_level else True,
            n_paths=int(bkeep.sum()),
        )
    )
    return run, reports


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def run_experiment(
    config: ExperimentConfig, verify: bool = True, overwrite: bool = False
) -> tuple[RunManifest, list[StatReport], Path]:
    errors = validate(config)
    if errors:
        raise ConfigError(errors)
    out_dir = config.resolved_output_dir()
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not overwrite:
        raise ConfigError(
            [f"output_dir: {out_dir} already holds a run (use --overwrite)"]
        )
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.model == "bernoulli":
        run, reports = bernoulli_suite(config, verify)
    else:
        run, reports = general_suite(config, verify)

    files = []
    write_series_csv(series_rows(run), out_dir / "series.csv")
    files.append("series.csv")
    write_checkpoints_csv(run, out_dir / "checkpoints.csv")
    files.append("checkpoints.csv")
    if reports:
        write_report(reports, out_dir / "report.txt")
        files.append("report.txt")

    digests = []
    for name in files:
        digest = hashlib.sha256((out_dir / name).read_bytes()).hexdigest()
        digests.append({"name": name, "sha256": digest})
    manifest = RunManifest(
        config=config.to_dict(),
        version=__version__,
        timestamp=datetime.now(timezone.utc).isoformat(),
        files=digests,
    )
    manifest_path.write_text(manifest.to_json() + "\n")
    return manifest, reports, out_dir


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="config file (flat key = value)")
    parser.add_argument("--model", choices=("bernoulli", "general"))
    parser.add_argument("--r", type=float)
    parser.add_argument("--d", type=float)
    parser.add_argument("--p", type=float)
    parser.add_argument("--payoff", type=str)
    parser.add_argument("--dt", type=float)
    parser.add_argument("--t-end", dest="t_end", type=float)
    parser.add_argument("--n-paths", dest="n_paths", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument(
        "--checkpoints", type=lambda s: tuple(float(x) for x in s.split(","))
    )
    parser.add_argument("--output-dir", dest="output_dir", type=str)
    parser.add_argument(
        "--deviation-factors",
        dest="deviation_factors",
        type=lambda s: tuple(float(x) for x in s.split(",")),
    )
    parser.add_argument("--block-paths", dest="block_paths", type=int)
    parser.add_argument("--overwrite", action="store_true")


def _config_from_args(args) -> ExperimentConfig:
    base = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for name in (
        "model",
        "r",
        "d",
        "p",
        "payoff",
        "dt",
        "t_end",
        "n_paths",
        "seed",
        "checkpoints",
        "output_dir",
        "deviation_factors",
        "block_paths",
    ):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    from .config import apply_overrides as _apply

    return _apply(base, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kylesim",
        description="Simulate and statistically certify the random-horizon insider equilibrium",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, desc in (
        ("simulate", "emit series and per-path checkpoint CSVs"),
        ("verify", "run the test battery and write a report"),
        ("sweep", "grid over r or p with one output cell per value"),
    ):
        sp = sub.add_parser(cmd, help=desc)
        _add_config_flags(sp)
        if cmd == "sweep":
            sp.add_argument("--param", choices=("r", "p"), required=True)
            sp.add_argument(
                "--values",
                required=True,
                type=lambda s: tuple(float(x) for x in s.split(",")),
            )
    tp = sub.add_parser("table", help="summarize existing report files")
    tp.add_argument("reports", nargs="+", help="report files or run directories")

    args = parser.parse_args(argv)

    try:
        if args.command == "table":
            reports = []
            for ref in args.reports:
                path = Path(ref)
                if path.is_dir():
                    path = path / "report.txt"
                reports.extend(read_report(path))
            print(summarize(reports))
            return 0

        if args.command == "sweep":
            base = _config_from_args(args)
            any_fail = False
            for value in args.values:
                cell = apply_overrides(base, {args.param: value})
                cell_dir = base.resolved_output_dir() / f"{args.param}_{value:g}"
                cell = apply_overrides(cell, {"output_dir": str(cell_dir)})
                _, reports, out_dir = run_experiment(
                    cell, verify=True, overwrite=args.overwrite
                )
                n_fail = sum(not r.passed for r in reports)
                any_fail |= n_fail > 0
                print(f"{args.param}={value:g}: {out_dir} ({n_fail} failures)")
            return 1 if any_fail else 0

        config = _config_from_args(args)
        verify = args.command == "verify"
        _, reports, out_dir = run_experiment(config, verify=verify, overwrite=args.overwrite)
        if reports:
            print(summarize(reports))
        print(f"run written to {out_dir}")
        return 1 if any(not r.passed for r in reports) else 0

    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    except DivergenceBudgetError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
