"""
Batch front end: ``memsde <subcommand> --config run.toml [overrides]``.

Exit status: 0 success, 2 when a bound check or condition check fails,
1 when the run itself failed (bad config, I/O, blow-up).
"""
import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from src import __app_name__, __version__
from src.errors import MemSDEError
from src.backend.artifacts import ArtifactWriter
from src.backend.conditions import PathSampler, check_conditions
from src.backend.girsanov import (WindowFunctional, couple, estimate_realized_lipschitz, girsanov_report,
                                  rn_density_ensemble, verify_dual_accumulators)
from src.backend.integrator import replay_residual, simulate
from src.backend.stationary import (BoundCheckReport, Verdict, energy_inequality_check, energy_sample,
                                    growth_diagnostic, increment_samples, increment_tail_check_samples,
                                    kb_average, kb_convergence, lift_covariance, moment_bound_check,
                                    moment_limit, zero_past)
from src.config.settings import RunConfig, apply_overrides, config_hash, load_config, serialize_config
from src.models.drift import LinearDistributedDelay

logger = logging.getLogger("CLI")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2
THREADS_ENV = "MEMSDE_THREADS"
MARTINGALE_SIGMAS = 3.0
DISCREPANCY_SLACK = 1.01
NOVIKOV_SLACK = 1e-6


@dataclass
class RunContext:
    config: RunConfig
    writer: ArtifactWriter
    threads: int
    status: Dict[str, object] = field(default_factory=dict)

    @property
    def sim(self):
        return self.config.sim


def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning(f"Ignoring non-integer {THREADS_ENV}={env!r}")
    return 1


def _report_rows(reports: List[BoundCheckReport]) -> List[dict]:
    return [r.to_dict() for r in reports]


def cmd_simulate(ctx: RunContext) -> bool:
    config, sim = ctx.config, ctx.sim
    spec = config.drift_spec()
    initial = config.past(config.girsanov.x_past, window_span=sim.window)
    traj = simulate(spec, initial, sim.T, sim.dt, sim.seed, r=sim.stopping_radius)
    residual = replay_residual(traj, spec, initial)
    ctx.writer.write_csv("trajectory.csv", traj.to_csv_text())
    ctx.writer.write_json("trajectory.json", {**traj.sidecar(), "replay_residual": residual,
                                              "initial_history": initial.to_dict()})
    ctx.status["replay_residual"] = residual
    return True


def cmd_stationary(ctx: RunContext) -> bool:
    config, sim = ctx.config, ctx.sim
    spec = config.drift_spec()
    measure = kb_average(spec, sim.n, sim.T, sim.dt, sim.seed, mode=sim.mode,
                         capture_memory=bool(spec.kernels), threads=ctx.threads)
    sidecar = measure.sidecar()
    family = spec.family
    if isinstance(family, LinearDistributedDelay) and spec.dimension == 1:
        oracle = lift_covariance(family.b, family.kappa, family.rate)
        sidecar["lift_covariance"] = {"empirical": measure.joint_covariance(), "oracle": oracle}
    if config.checks.kb_horizons:
        rows = kb_convergence(spec, config.checks.kb_horizons, sim.n, sim.dt, sim.seed,
                              projections=config.checks.projections, threads=ctx.threads)
        sidecar["convergence"] = rows
        ctx.writer.write_dat("convergence.dat", ["T", "w1", "noise_floor", "excess"],
                             [[r["T"], r["w1"], r["noise_floor"], r["excess"]] for r in rows])
    ctx.writer.write_csv("measure.csv", measure.to_csv_text())
    ctx.writer.write_json("measure.json", sidecar)
    ctx.status["second_moment"] = measure.second_moment()
    return True


def _sampler(config: RunConfig) -> PathSampler:
    return PathSampler(**config.checks.sampler.model_dump())


def cmd_check_conditions(ctx: RunContext) -> bool:
    config = ctx.config
    spec = config.drift_spec()
    sampler = _sampler(config)
    bounds = [sampler.endpoint_bound * f for f in config.checks.bounds]
    report = check_conditions(spec, sampler, ctx.sim.seed, rate=config.checks.rate, bounds=bounds,
                              c1_budget=config.checks.c1_budget, threads=ctx.threads)
    ctx.writer.write_json("conditions.json", report.to_dict())
    ctx.writer.write_dat("lipschitz_profile.dat", ["R", "K_hat"], report.lipschitz_profile)
    ctx.writer.write_dat("growth_profile.dat", ["R", "C3_hat"], report.growth_profile)
    ctx.status["violations"] = report.violations
    return not report.any_violation


def _constants(config: RunConfig):
    spec = config.drift_spec()
    family = spec.family
    analytic = family.dissipativity_constants()
    c1 = config.checks.constants.C1 if config.checks.constants.C1 is not None else (analytic[0] if analytic else None)
    c2 = config.checks.constants.C2 if config.checks.constants.C2 is not None else (analytic[1] if analytic else None)
    c3 = config.checks.constants.C3 if config.checks.constants.C3 is not None else family.growth_constant()
    return spec, c1, c2, c3


def _missing_constants_report(name: str) -> BoundCheckReport:
    return BoundCheckReport(name, math.nan, math.nan, 0.0, Verdict.FAIL,
                            details={"reason": "drift has no dissipativity/growth constants"})


def cmd_check_bounds(ctx: RunContext) -> bool:
    config, sim, checks = ctx.config, ctx.sim, ctx.config.checks
    spec, c1, c2, c3 = _constants(config)
    reports: List[BoundCheckReport] = []
    if c1 is None or c2 is None or c3 is None:
        reports.append(_missing_constants_report("moment_bound"))
    else:
        measure = kb_average(spec, sim.n, sim.T, sim.dt, sim.seed, threads=ctx.threads)
        reports.append(moment_bound_check(measure, c1, c2, seed=sim.seed))
        m_star = moment_limit(c1, c2, spec.dimension)
        pairs = increment_samples(spec, sim.n, sim.T, sim.dt, sim.seed, checks.dt_increments, threads=ctx.threads)
        for lag in checks.dt_increments:
            start, end = pairs[lag]
            for z in checks.z:
                reports.append(increment_tail_check_samples(start, end, z, lag, c3, m_star))
        reports.append(energy_inequality_check(energy_sample(spec, sim.n, sim.T, sim.dt, sim.seed,
                                                            threads=ctx.threads), c1, c2))
    traj = simulate(spec, zero_past(spec, sim.dt), sim.T, sim.dt, sim.seed)
    growth = growth_diagnostic(traj, checks.delta, checks.delta0, checks.K_window)
    reports.append(growth)
    ctx.writer.write_json("bounds.json", _report_rows(reports))
    ctx.writer.write_dat("growth.dat", growth.curve_header, growth.curve,
                         comments=[f"K={checks.K_window} delta={checks.delta} delta0={checks.delta0}"])
    failed = [r.bound_name for r in reports if not r.passed]
    ctx.status["failed"] = failed
    return not failed


def cmd_diagnose_growth(ctx: RunContext) -> bool:
    config, sim, checks = ctx.config, ctx.sim, ctx.config.checks
    spec = config.drift_spec()
    traj = simulate(spec, zero_past(spec, sim.dt), sim.T, sim.dt, sim.seed)
    report = growth_diagnostic(traj, checks.delta, checks.delta0, checks.K_window)
    ctx.writer.write_json("growth.json", report.to_dict())
    ctx.writer.write_dat("growth.dat", report.curve_header, report.curve,
                         comments=[f"K={checks.K_window} delta={checks.delta} delta0={checks.delta0}"])
    return report.passed


def cmd_girsanov(ctx: RunContext) -> bool:
    config, sim, g = ctx.config, ctx.sim, ctx.config.girsanov
    spec = config.drift_spec()
    x_past = config.past(g.x_past)
    y_past = config.past(g.y_past)
    traj = simulate(spec, x_past, g.horizon, sim.dt, sim.seed)
    report = girsanov_report(traj, x_past, y_past, spec, g.k_prime, g.lambda_prime)
    dual = verify_dual_accumulators(traj, x_past, y_past, spec)
    density = rn_density_ensemble(spec, x_past, y_past, g.n_paths, g.density_horizon, sim.seed,
                                  threads=ctx.threads)
    profile = report.profile
    estimate = estimate_realized_lipschitz(traj, spec, _sampler(config), sim.seed, rate=profile.rate,
                                           threads=ctx.threads)
    estimated = profile.with_constant(estimate.K_hat)
    martingale_ok = abs(density["mean"] - 1.0) <= MARTINGALE_SIGMAS * density["standard_error"]
    checks = {
        "discrepancy_within_bound": profile.max_bound_ratio() <= DISCREPANCY_SLACK,
        "novikov_within_bound": report.truncated_integral <= report.novikov_bound + NOVIKOV_SLACK,
        "dual_accumulators": bool(dual["passed"]),
        "martingale_normalization": martingale_ok,
        "discrepancy_within_estimated_bound": estimated.max_bound_ratio() <= DISCREPANCY_SLACK,
    }
    data = report.to_dict()
    data.update({"dual_accumulators": dual, "density_ensemble": density, "checks": checks,
                 "estimated_bound": {"K_hat": estimate.K_hat, "endpoint_bound": estimate.endpoint_bound,
                                     "n_pairs": estimate.n_pairs, "L_hat": estimated.L,
                                     "L_analytic": profile.L,
                                     "max_bound_ratio": estimated.max_bound_ratio()}})
    ctx.writer.write_json("girsanov.json", data)
    ctx.writer.write_dat("discrepancy.dat", ["t", "abs_delta_a", "bound"], profile.dat_rows(),
                         comments=[f"L={profile.L} L_hat={estimated.L} lambda={profile.rate} "
                                   f"lambda_prime={profile.rate_prime}"])
    ctx.status["checks"] = checks
    return all(checks.values())


def cmd_couple(ctx: RunContext) -> bool:
    config, sim, c = ctx.config, ctx.sim, ctx.config.coupling
    spec = config.drift_spec()
    past1 = config.past(c.past1)
    past2 = config.past(c.past2)
    functional = WindowFunctional(c.window, c.bound, c.coordinate)
    report = couple(spec, past1, past2, sim.T, sim.dt, sim.seed, functional)
    ctx.writer.write_json("coupling.json", report.to_dict())
    ctx.writer.write_dat("coupling.dat", ["t", "abs_x1_minus_x2", "average_1", "average_2", "gap"],
                         report.dat_rows())
    ctx.status["final_gap"] = float(report.gap[-1])
    return True


COMMANDS: Dict[str, Callable[[RunContext], bool]] = {
    "simulate": cmd_simulate,
    "stationary": cmd_stationary,
    "check-conditions": cmd_check_conditions,
    "check-bounds": cmd_check_bounds,
    "girsanov": cmd_girsanov,
    "couple": cmd_couple,
    "diagnose-growth": cmd_diagnose_growth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=__app_name__,
                                     description="Simulation and verification lab for SDEs with infinite memory.")
    parser.add_argument("--version", action="version", version=f"{__app_name__} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--seed", type=int, help="run seed (overrides sim.seed)")
        p.add_argument("--threads", type=int, help=f"worker threads (fallback: ${THREADS_ENV}, else 1)")
        p.add_argument("--T", type=float, dest="T", help="horizon (overrides sim.T)")
        p.add_argument("--dt", type=float, help="time step (overrides sim.dt)")
        p.add_argument("--n", type=int, help="ensemble size (overrides sim.n)")
        p.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        config = load_config(args.config)
        config, overrides = apply_overrides(config, seed=args.seed, T=args.T, dt=args.dt, n=args.n,
                                            directory=args.out)
        writer = ArtifactWriter(config.output.directory, config.output.formats)
        writer.write_text("config.toml", serialize_config(config))
        ctx = RunContext(config, writer, resolve_threads(args.threads))
        logger.info(f"Running {args.command} (seed={config.sim.seed}, threads={ctx.threads})")
        passed = COMMANDS[args.command](ctx)
        ctx.status["passed"] = passed
        writer.write_manifest(args.command, config_hash(config), config.sim.seed, overrides, ctx.status)
    except (MemSDEError, OSError):
        logger.exception(f"{args.command} failed")
        return EXIT_ERROR
    if not passed:
        logger.warning(f"{args.command}: at least one check failed")
        return EXIT_CHECK_FAILED
    logger.info(f"{args.command} finished")
    return EXIT_OK


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s [%(levelname)s] %(name)s: %(message)s")
    sys.exit(run())
