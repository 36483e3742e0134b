"""Removal of the rounding residual: ``F(theta) - nu2 * R = 0`` for nu2 from 1 to 0."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .case_io import DeviceResult, Solution
from .discretize import ResidualVector
from .kkt import NewtonOptions, NewtonResult, generation_cost, inequality_values, kkt_residual, newton_solve
from .network import Network, PrimalDualPoint
from .stage1 import HomotopyFailure, HomotopyTrace, StepPolicy, TraceRow, continuation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage2Options:
    step: StepPolicy = field(default_factory=StepPolicy)
    newton: NewtonOptions = field(default_factory=NewtonOptions)
    step_max_iter: int = 20
    resolve_max_iter: int = 50
    zero_residual: float = 1e-12
    polish_tol: float = 1e-10
    polish_max_iter: int = 5


def polish(spb, theta: PrimalDualPoint, opts: Stage2Options) -> PrimalDualPoint:
    """A few more Newton steps at fixed ``spb``; the input is kept if they fail.

    The IPM stops at ``newton.tol``; two converged points of the same problem
    can differ by that much in the objective.  Polishing makes them coincide.
    """
    if opts.polish_max_iter <= 0:
        return theta
    r = newton_solve(spb, theta, replace(opts.newton, tol=opts.polish_tol, max_iter=opts.polish_max_iter))
    return r.point if r.converged else theta


@dataclass
class Stage2Result:
    point: PrimalDualPoint | None
    converged: bool
    iterations: int
    trace: HomotopyTrace
    message: str = ""


def _record(res: ResidualVector):
    def record(nu: float, r: NewtonResult) -> TraceRow:
        return TraceRow(nu, r.iterations, generation_cost(res.subproblem.network, r.point.p), nu * res.norm, r.residual)

    return record


def solve_stage2(network: Network, theta_p: PrimalDualPoint, residual: ResidualVector, opts: Stage2Options | None = None) -> Stage2Result:
    """Track the error-injection system from ``theta'`` to the discrete problem."""
    opts = opts or Stage2Options()
    base = residual.subproblem
    if residual.norm <= opts.zero_residual:
        return Stage2Result(theta_p, True, 0, HomotopyTrace(final=theta_p), "residual already zero")
    step_opts = replace(opts.newton, max_iter=min(opts.step_max_iter, opts.newton.max_iter))

    def solve_at(nu: float, pt: PrimalDualPoint) -> NewtonResult:
        return newton_solve(base.with_(nu2=nu, offset=residual.R), pt, step_opts)

    try:
        trace = continuation(solve_at, theta_p, opts.step, _record(residual))
    except HomotopyFailure as exc:
        log.info("stage II failed: %s", exc)
        return Stage2Result(None, False, exc.trace.iterations, exc.trace, str(exc))
    trace.final = polish(base.with_(nu2=0.0, offset=None), trace.final, opts)
    return Stage2Result(trace.final, True, trace.iterations, trace)


def round_and_resolve(network: Network, theta_p: PrimalDualPoint, residual: ResidualVector, opts: Stage2Options | None = None) -> Stage2Result:
    """Single Newton solve of the discrete problem straight from ``theta'``."""
    opts = opts or Stage2Options()
    r = newton_solve(residual.subproblem, theta_p, replace(opts.newton, max_iter=opts.resolve_max_iter))
    trace = HomotopyTrace(rows=[TraceRow(0.0, r.iterations, generation_cost(network, r.point.p), 0.0, r.residual)])
    if not r.converged:
        return Stage2Result(None, False, r.iterations, trace, f"round-and-resolve {r.status}, best residual {r.best_residual:.3e}")
    trace.final = polish(residual.subproblem, r.point, opts)
    return Stage2Result(trace.final, True, r.iterations, trace)


@dataclass
class FinalCheck:
    kkt_residual: float
    max_violation: float
    settings_ok: bool

    def passed(self, tol: float = 1e-6, feas_tol: float = 1e-6) -> bool:
        return self.kkt_residual <= tol and self.max_violation <= feas_tol and self.settings_ok


def check_final(network: Network, theta: PrimalDualPoint, residual: ResidualVector) -> FinalCheck:
    spb = residual.subproblem.with_(nu2=0.0, offset=None)
    F = kkt_residual(spb, theta.vec, spb.eps)
    h = inequality_values(spb, theta)
    ok = all(float(d) in ctrl.allowed for d, ctrl in zip(spb.base, network.controls))
    return FinalCheck(float(np.abs(F).max(initial=0.0)), float(max(h.max(initial=-math.inf), 0.0)), ok)


def build_solution(
    network: Network,
    theta: PrimalDualPoint | None,
    residual: ResidualVector | None,
    status: str,
    message: str = "",
    stage2_needed: bool | None = None,
    diagnostics: dict | None = None,
    tol: float = 1e-6,
    feas_tol: float = 1e-6,
) -> Solution:
    """Solution record; ``status`` is downgraded if the final checks fail."""
    case = network.case
    diagnostics = dict(diagnostics or {})
    if theta is None or residual is None:
        return Solution(
            case.name, network.hash, "failed", math.nan, [int(b) for b in network.bus_ids], [], [],
            [int(network.bus_ids[k]) for k in network.gen_bus], [], [],
            message=message, stage2_needed=stage2_needed, diagnostics=diagnostics,
        )
    chk = check_final(network, theta, residual)
    if status == "converged" and not chk.passed(tol, feas_tol):
        status = "failed"
        message = message or f"final checks failed (residual {chk.kkt_residual:.3e}, violation {chk.max_violation:.3e})"
    v = theta.v
    settings = residual.subproblem.base
    devices = [
        DeviceResult(c.id, c.kind, float(d), float(c.reference), bool(float(d) != float(c.reference)))
        for c, d in zip(network.controls, settings)
    ]
    return Solution(
        case_name=case.name,
        case_hash=network.hash,
        status=status,
        objective=generation_cost(network, theta.p),
        bus_ids=[int(b) for b in network.bus_ids],
        vm=[float(x) for x in np.abs(v)],
        va=[float(x) for x in np.angle(v)],
        gen_bus=[int(network.bus_ids[k]) for k in network.gen_bus],
        p=[float(x) for x in theta.p],
        q=[float(x) for x in theta.q],
        devices=devices,
        stage2_needed=stage2_needed,
        kkt_residual=chk.kkt_residual,
        max_violation=chk.max_violation,
        message=message,
        diagnostics=diagnostics,
    )
