"""Stage I, rounding and Stage II (or round-and-resolve) as one call."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .case_io import Solution
from .discretize import ResidualVector, RoundingReport, compute_residual, select_settings
from .network import Network, PrimalDualPoint
from .stage1 import HomotopyFailure, HomotopyOptions, HomotopyTrace, solve_stage1
from .stage2 import Stage2Options, Stage2Result, build_solution, round_and_resolve, solve_stage2

log = logging.getLogger(__name__)

MODES = ("auto", "force", "off")


@dataclass(frozen=True)
class PipelineOptions:
    homotopy: HomotopyOptions = field(default_factory=HomotopyOptions)
    stage2: Stage2Options = field(default_factory=Stage2Options)
    mode: str = "auto"  # auto: round-and-resolve first, Stage II on failure
    screen: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class PipelineResult:
    solution: Solution
    stage1: HomotopyTrace | None = None
    theta_star: PrimalDualPoint | None = None
    report: RoundingReport | None = None
    theta_prime: PrimalDualPoint | None = None
    residual: ResidualVector | None = None
    resolve: Stage2Result | None = None
    stage2: Stage2Result | None = None
    final: PrimalDualPoint | None = None


def _stage2_with_retry(network, theta_star, report, theta_p, res, opts, eps):
    out = solve_stage2(network, theta_p, res, opts.stage2)
    if out.converged or not report.flagged:
        return out, report, theta_p, res
    log.info("stage II failed; retrying with %d flagged devices on their fallback setting", len(report.flagged))
    report2 = report.retried()
    theta_p2, res2 = compute_residual(network, theta_star, report2, eps, opts.homotopy.k_slack)
    out2 = solve_stage2(network, theta_p2, res2, opts.stage2)
    out2.message = "retried with fallback settings" + (f"; {out2.message}" if out2.message else "")
    return out2, report2, theta_p2, res2


def solve_case(network: Network, opts: PipelineOptions | None = None) -> PipelineResult:
    opts = opts or PipelineOptions()
    t0 = time.perf_counter()
    diag: dict = {}
    try:
        theta_star, trace1 = solve_stage1(network, opts.homotopy)
    except HomotopyFailure as exc:
        diag["stage1_nu"] = exc.trace.nus
        diag["stage1_last_nu"] = exc.last_nu
        sol = build_solution(network, None, None, "failed", f"stage I failed: {exc}", diagnostics=diag)
        return PipelineResult(sol, stage1=exc.trace)
    diag["stage1_nu"] = trace1.nus
    diag["stage1_iterations"] = [r.iterations for r in trace1.rows]
    eps = opts.homotopy.newton.eps_min
    report = select_settings(network, theta_star, screen=opts.screen, warm_start=opts.homotopy.warm_start)
    theta_p, res = compute_residual(network, theta_star, report, eps, opts.homotopy.k_slack)
    diag["residual_norm"] = res.norm
    result = PipelineResult(None, trace1, theta_star, report, theta_p, res)  # type: ignore[arg-type]

    final, stage2_needed, message = None, None, ""
    if opts.mode in ("auto", "off"):
        rr = round_and_resolve(network, theta_p, res, opts.stage2)
        result.resolve = rr
        diag["resolve_iterations"] = rr.iterations
        diag["resolve_converged"] = rr.converged
        stage2_needed = not rr.converged
        if rr.converged:
            final = rr.point
        else:
            message = rr.message
    if opts.mode == "force" or (opts.mode == "auto" and final is None):
        s2, report, theta_p, res = _stage2_with_retry(network, theta_star, report, theta_p, res, opts, eps)
        result.stage2, result.report, result.theta_prime, result.residual = s2, report, theta_p, res
        diag["stage2_nu"] = s2.trace.nus
        diag["stage2_iterations"] = s2.iterations
        final = s2.point if s2.converged else None
        message = s2.message
    diag["n_fallback"] = report.n_fallback
    diag["flagged"] = [report.devices[k].id for k in report.flagged]
    diag["seconds"] = round(time.perf_counter() - t0, 3)
    status = "converged" if final is not None else "failed"
    result.final = final
    result.solution = build_solution(
        network, final, res, status, "" if final is not None else message, stage2_needed=stage2_needed, diagnostics=diag,
        tol=opts.homotopy.newton.tol, feas_tol=opts.homotopy.newton.feas_tol,
    )
    return result
