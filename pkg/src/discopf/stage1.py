"""Relaxed problem along the incremental-model-building path, nu1 from 1 to 0.

At ``nu1 = 1`` every branch is paralleled by a large conductance, every
other bus is tied to the reference bus (and the reference bus to a fixed
``1 + j0`` source) through the same conductance, loads are removed and
generator boxes contain zero, so the flat start is nearly a solution.
As ``nu1`` falls the shorts fade, loads return and generator limits tighten.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .kkt import NewtonOptions, NewtonResult, SubProblem, generation_cost, newton_solve
from .network import Layout, Network, PrimalDualPoint

log = logging.getLogger(__name__)

RHO = 1e-3  # margin keeping P = Q = 0 strictly inside the boxes at nu1 = 1


@dataclass(frozen=True)
class StepPolicy:
    init: float = 0.1
    min: float = 1e-4
    growth: float = 1.5
    shrink: float = 0.5

    def __post_init__(self):
        if not 0 < self.min <= self.init <= 1:
            raise ValueError("need 0 < min step <= initial step <= 1")
        if self.growth <= 1 or not 0 < self.shrink < 1:
            raise ValueError("need growth > 1 and 0 < shrink < 1")


@dataclass(frozen=True)
class HomotopyOptions:
    k_adj: float = 0.1
    k_slack: float = 10.0
    g_short: float = 100.0
    short_branches: bool = True
    short_to_ref: bool = True
    ref_short: str = "hybrid"  # "hybrid", "bus" or "source"
    step: StepPolicy = field(default_factory=StepPolicy)
    newton: NewtonOptions = field(default_factory=NewtonOptions)
    # iteration cap for continuation steps; a slower solve counts as a failed step
    step_max_iter: int = 20
    mu_init: float = 1.0
    s_floor: float = 1e-2
    warm_start: bool = False
    warm_kadj_factor: float = 1e3
    rho: float = RHO

    def __post_init__(self):
        if self.k_adj < 0 or self.k_slack <= 0 or self.g_short <= 0 or self.rho <= 0:
            raise ValueError("need k_adj >= 0, k_slack > 0, g_short > 0 and rho > 0")
        if self.ref_short not in ("hybrid", "bus", "source"):
            raise ValueError(f"unknown ref_short '{self.ref_short}'")

    @property
    def effective_k_adj(self) -> float:
        return self.k_adj * (self.warm_kadj_factor if self.warm_start else 1.0)


@dataclass
class TraceRow:
    nu: float
    iterations: int
    objective: float
    max_slack: float
    residual: float


@dataclass
class HomotopyTrace:
    rows: list[TraceRow] = field(default_factory=list)
    rejected: list[tuple[float, str]] = field(default_factory=list)
    final: PrimalDualPoint | None = None

    @property
    def nus(self) -> list[float]:
        return [r.nu for r in self.rows]

    @property
    def iterations(self) -> int:
        return sum(r.iterations for r in self.rows)

    def to_csv(self, header: tuple[str, str] = ("nu1", "max_slack")) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([header[0], "iterations", "objective", header[1], "residual"])
        for r in self.rows:
            w.writerow([repr(r.nu), r.iterations, repr(r.objective), repr(r.max_slack), repr(r.residual)])
        return buf.getvalue()


class HomotopyFailure(RuntimeError):
    def __init__(self, message: str, trace: HomotopyTrace, last_nu: float):
        super().__init__(message)
        self.trace = trace
        self.last_nu = last_nu


def continuation(
    solve_at: Callable[[float, PrimalDualPoint], NewtonResult],
    start: PrimalDualPoint,
    policy: StepPolicy,
    record: Callable[[float, NewtonResult], TraceRow],
    nu0: float = 1.0,
    solve_first: bool = True,
) -> HomotopyTrace:
    """Generic parameter continuation from ``nu0`` down to exactly 0.

    Every solve starts at the last accepted point.  A failed step is
    halved (by ``policy.shrink``) and retried; success grows the next step.
    """
    trace = HomotopyTrace()
    point = start
    nu = nu0
    if solve_first:
        res = solve_at(nu, point)
        if not res.converged:
            raise HomotopyFailure(f"initial solve at nu={nu} failed ({res.status}, residual {res.residual:.3e})", trace, math.nan)
        point = res.point
        trace.rows.append(record(nu, res))
    step = policy.init
    while nu > 0.0:
        target = max(nu - step, 0.0)
        if target < 1e-12:
            target = 0.0
        res = solve_at(target, point)
        if res.converged:
            nu, point = target, res.point
            trace.rows.append(record(nu, res))
            step = min(step * policy.growth, 1.0)
            continue
        trace.rejected.append((target, res.status))
        log.debug("step to nu=%.6g rejected (%s, residual %.3e)", target, res.status, res.residual)
        step = min(step, nu) * policy.shrink
        if step < policy.min:
            raise HomotopyFailure(
                f"step below minimum at nu={nu:.6g}; last residuals {[round(r.residual, 12) for r in trace.rows[-3:]]}",
                trace,
                nu,
            )
    trace.final = point
    return trace


def base_settings(network: Network, nu: float, warm_start: bool = False) -> np.ndarray:
    """``nu * trivial + (1 - nu) * origin``; warm start keeps the prior throughout."""
    origin = network.base_origin()
    if warm_start:
        return origin
    return nu * network.trivial() + (1.0 - nu) * origin


def embed(network: Network, nu: float, opts: HomotopyOptions | None = None, layout: Layout | None = None) -> SubProblem:
    """Stage I sub-problem at homotopy factor ``nu``."""
    opts = opts or HomotopyOptions()
    if not 0.0 <= nu <= 1.0:
        raise ValueError("nu must lie in [0, 1]")

    def relax(lo, hi):
        return (1 - nu) * lo + nu * np.minimum(lo, -opts.rho), (1 - nu) * hi + nu * np.maximum(hi, opts.rho)

    pmin, pmax = relax(network.pmin, network.pmax)
    qmin, qmax = relax(network.qmin, network.qmax)
    return SubProblem(
        network=network,
        layout=layout or network.layout,
        base=base_settings(network, nu, opts.warm_start),
        pmin=pmin,
        pmax=pmax,
        qmin=qmin,
        qmax=qmax,
        stage="I",
        nu=nu,
        g_short=opts.g_short,
        short_branches=opts.short_branches,
        short_to_ref=opts.short_to_ref,
        ref_short=opts.ref_short,
        load_factor=1.0 - nu,
        k_adj=opts.effective_k_adj,
        k_slack=opts.k_slack,
    )


def initial_point(spb: SubProblem, x0: np.ndarray | None = None, mu_init: float = 1.0, s_floor: float = 1e-2) -> PrimalDualPoint:
    """``lam = 0``, ``s = max(-h(x0), s_floor)`` and ``mu = mu_init``.

    Without ``x0`` the flat start is used: ``v = 1 + j0``, zero injections
    and zero adjustments.
    """
    from .kkt import inequality_values

    L = spb.layout
    pt = PrimalDualPoint(L)
    if x0 is None:
        pt.vec[L.vr] = 1.0
    else:
        pt.vec[L.x] = x0
    pt.vec[L.s] = 1.0
    h = inequality_values(spb, pt)
    pt.vec[L.s] = np.maximum(-h, s_floor)
    pt.vec[L.mu] = mu_init
    return pt


def _row(spb_at: Callable[[float], SubProblem]):
    def record(nu: float, res: NewtonResult) -> TraceRow:
        p = res.point
        isl = np.hypot(p.isl_re, p.isl_im)
        return TraceRow(
            nu=nu,
            iterations=res.iterations,
            objective=generation_cost(spb_at(nu).network, p.p),
            max_slack=float(isl.max(initial=0.0)),
            residual=res.residual,
        )

    return record


def solve_stage1(network: Network, opts: HomotopyOptions | None = None, start: PrimalDualPoint | None = None) -> tuple[PrimalDualPoint, HomotopyTrace]:
    """Track the relaxed problem from the trivial instance to ``nu1 = 0``."""
    opts = opts or HomotopyOptions()
    L = network.layout

    def spb_at(nu: float) -> SubProblem:
        return embed(network, nu, opts, L)

    if start is None:
        start = initial_point(spb_at(1.0), mu_init=opts.mu_init, s_floor=opts.s_floor)

    step_opts = replace(opts.newton, max_iter=min(opts.step_max_iter, opts.newton.max_iter))

    def solve_at(nu: float, pt: PrimalDualPoint) -> NewtonResult:
        return newton_solve(spb_at(nu), pt, opts.newton if pt is start else step_opts)

    trace = continuation(solve_at, start, opts.step, _row(spb_at))
    log.info("stage I done: %d steps, %d Newton iterations", len(trace.rows), trace.iterations)
    return trace.final, trace


def relaxed_settings(network: Network, theta: PrimalDualPoint, nu: float = 0.0, warm_start: bool = False) -> np.ndarray:
    """Effective control values ``d_hat(nu) + dd`` at a Stage I point."""
    spb = SubProblem(
        network, theta.layout, base_settings(network, nu, warm_start),
        network.pmin, network.pmax, network.qmin, network.qmax,
    )
    return spb.settings(theta.vec[theta.layout.x])


def with_options(opts: HomotopyOptions, **changes) -> HomotopyOptions:
    return replace(opts, **changes)
