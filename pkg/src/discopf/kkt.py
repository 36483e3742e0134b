"""Perturbed KKT system of one fixed-homotopy sub-problem and its Newton solver.

Residual rows, in order::

    stationarity   grad f + Jg' lam + Jh' mu        (one row per primal)
    equality       g(x)                             (KCL re, KCL im, ref angle)
    inequality     h(x) + s                         (explicit slacks, s >= 0)
    complementarity  -mu * s + eps                  (i.e. mu * h + eps)

Stage II subtracts ``nu2 * R`` from the whole vector.

Slack-injection stationarity rows are divided by the homotopy factor, so
they read ``2 k_slack isl - lam_kcl`` and stay well posed when the factor
is zero (the injections then drop out of KCL and are inert).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import Layout, Network, PrimalDualPoint, branch_jet, injection_jet

log = logging.getLogger(__name__)


REF_SHORTS = ("hybrid", "bus", "source")


class AssemblyError(ArithmeticError):
    def __init__(self, row: int, what: str = "residual"):
        super().__init__(f"non-finite {what} entry at row {row}")
        self.row = row


@dataclass(frozen=True, eq=False)
class SubProblem:
    """One homotopy instance; every embedded quantity is explicit."""

    network: Network
    layout: Layout
    base: np.ndarray  # per-control base setting; free controls add dd
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    stage: str = "I"
    nu: float = 0.0  # shorting, slack coupling and penalty factor
    nu2: float = 0.0
    g_short: float = 0.0
    short_branches: bool = True
    short_to_ref: bool = True
    ref_short: str = "hybrid"  # see stage1.embed
    load_factor: float = 1.0
    k_adj: float = 0.0
    k_slack: float = 1.0
    eps: float | None = None  # fixed perturbation; None lets the solver schedule it
    offset: np.ndarray | None = None  # R of the error-injection system

    def __post_init__(self):
        if not 0.0 <= self.nu <= 1.0 or not 0.0 <= self.nu2 <= 1.0:
            raise ValueError("homotopy factors must lie in [0, 1]")
        if min(self.k_adj, self.k_slack, self.g_short) < 0:
            raise ValueError("penalty weights and conductances must be non-negative")

    @property
    def shunt_conductance(self) -> float:
        return self.nu * self.g_short

    @property
    def adj_weight(self) -> float:
        return self.nu * self.k_adj

    def settings(self, x: np.ndarray) -> np.ndarray:
        d = self.base.astype(float).copy()
        L = self.layout
        if L.n_d:
            d[L.dd_controls] += x[L.dd]
        return d

    def with_(self, **changes) -> "SubProblem":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass
class KktSystem:
    residual: np.ndarray
    jacobian: sp.csc_matrix
    norm: float


class _Triplets:
    def __init__(self):
        self.r, self.c, self.v = [], [], []

    def add(self, rows, cols, vals):
        rows, cols, vals = np.broadcast_arrays(np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float))
        self.r.append(rows.ravel())
        self.c.append(cols.ravel())
        self.v.append(vals.ravel())

    def arrays(self):
        if not self.r:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
        return np.concatenate(self.r), np.concatenate(self.c), np.concatenate(self.v)


@dataclass
class _Eval:
    f0: float
    f: float
    grad: np.ndarray
    g: np.ndarray
    h: np.ndarray
    jg: _Triplets
    jh: _Triplets
    hess: _Triplets | None


def _evaluate(spb: SubProblem, vec: np.ndarray, need_hess: bool) -> _Eval:
    net, L = spb.network, spb.layout
    x = vec[L.x]
    lam = vec[L.lam]
    mu = vec[L.mu]
    nb = net.n_bus
    vr, vi = x[L.vr], x[L.vi]
    V = vr + 1j * vi
    cvr = np.arange(L.vr.start, L.vr.stop)
    cvi = np.arange(L.vi.start, L.vi.stop)
    settings = spb.settings(x)
    tau, phi, bsh = net.device_values(settings)
    lam_c = lam[L.kcl_re] + 1j * lam[L.kcl_im]

    kcl = np.zeros(nb, dtype=complex)
    jg, jh = _Triplets(), _Triplets()
    hess = _Triplets() if need_hess else None
    re0, im0 = L.kcl_re.start, L.kcl_im.start

    def add_current(bus, I, J, cols, H=None):
        """Accumulate currents leaving ``bus`` with local Jacobian ``J``."""
        np.add.at(kcl, bus, I)
        ok = cols >= 0
        rows = np.broadcast_to(bus[:, None], cols.shape)
        jg.add((re0 + rows)[ok], cols[ok], J.real[ok])
        jg.add((im0 + rows)[ok], cols[ok], J.imag[ok])
        if need_hess and H is not None:
            w = np.conj(lam_c[bus])
            Hw = (w[:, None, None] * H).real
            ok2 = ok[:, :, None] & ok[:, None, :]
            ci = np.broadcast_to(cols[:, :, None], Hw.shape)
            cj = np.broadcast_to(cols[:, None, :], Hw.shape)
            hess.add(ci[ok2], cj[ok2], Hw[ok2])

    dd_of = np.append(L.dd_of, -1)

    def ctrl_col(ctrl):
        return dd_of[ctrl]  # -1 indexes the appended sentinel

    # branches
    f_, t_ = net.br_from, net.br_to
    bcols = np.stack([cvr[f_], cvi[f_], cvr[t_], cvi[t_], ctrl_col(net.tap_ctrl), ctrl_col(net.shift_ctrl)], axis=1)
    Ib, Jb, Hb = branch_jet(net.ys, net.bc, V[f_], V[t_], tau, phi)
    add_current(f_, Ib[:, 0], Jb[:, 0], bcols, Hb[:, 0])
    add_current(t_, Ib[:, 1], Jb[:, 1], bcols, Hb[:, 1])

    G = spb.shunt_conductance
    if spb.short_branches and net.n_branch:
        dv = V[f_] - V[t_]
        one = np.ones(net.n_branch)
        Js = G * np.stack([one, 1j * one, -one, -1j * one], axis=1)
        add_current(f_, G * dv, Js, bcols[:, :4])
        add_current(t_, -G * dv, -Js, bcols[:, :4])
    allb = np.arange(nb)
    if spb.short_to_ref:
        if spb.ref_short not in REF_SHORTS:
            raise ValueError(f"unknown ref_short '{spb.ref_short}'")
        # "source": every bus to a fixed 1+j0 source; "bus": every bus to the
        # reference bus; "hybrid": "bus" plus the reference bus to the source
        src = allb if spb.ref_short == "source" else allb[net.ref : net.ref + 1]
        if spb.ref_short != "bus":
            n = len(src)
            Js = np.stack([np.full(n, G + 0j), np.full(n, 1j * G)], axis=1)
            add_current(src, G * (V[src] - 1.0), Js, np.stack([cvr[src], cvi[src]], axis=1))
        if spb.ref_short != "source":
            k = np.delete(allb, net.ref)
            r = np.full(len(k), net.ref)
            one = np.ones(len(k))
            Js = G * np.stack([one, 1j * one, -one, -1j * one], axis=1)
            kcols = np.stack([cvr[k], cvi[k], cvr[r], cvi[r]], axis=1)
            add_current(k, G * (V[k] - V[r]), Js, kcols)
            add_current(r, -G * (V[k] - V[r]), -Js, kcols)
    vcols = np.stack([cvr, cvi], axis=1)
    ysh = net.gs + 1j * net.bs
    add_current(allb, ysh * V, np.stack([ysh, 1j * ysh], axis=1), vcols)

    if len(net.sh_bus):
        k = net.sh_bus
        Vk = V[k]
        scols = np.stack([cvr[k], cvi[k], ctrl_col(net.sh_ctrl)], axis=1)
        Js = np.stack([1j * bsh, -bsh + 0j, 1j * Vk], axis=1)
        Hs = np.zeros((len(k), 3, 3), dtype=complex)
        Hs[:, 0, 2] = Hs[:, 2, 0] = 1j
        Hs[:, 1, 2] = Hs[:, 2, 1] = -1.0
        add_current(k, 1j * bsh * Vk, Js, scols, Hs)

    ng = net.n_gen
    P, Q = x[L.p], x[L.q]
    if ng:
        k = net.gen_bus
        ds = np.zeros((ng, 4), dtype=complex)
        ds[:, 2] = 1.0
        ds[:, 3] = -1j
        Ig, Jgen, Hg = injection_jet(V[k], P - 1j * Q, ds)
        gcols = np.stack([cvr[k], cvi[k], np.arange(L.p.start, L.p.stop), np.arange(L.q.start, L.q.stop)], axis=1)
        add_current(k, -Ig, -Jgen, gcols, -Hg)

    if len(net.load_bus):
        k = net.load_bus
        s_conj = spb.load_factor * (net.pd - 1j * net.qd)
        Il, Jl, Hl = injection_jet(V[k], s_conj, np.zeros((len(k), 2), dtype=complex))
        add_current(k, Il, Jl, vcols[k], Hl)

    # slack injections enter KCL scaled by nu
    isl = x[L.isl_re] + 1j * x[L.isl_im]
    kcl -= spb.nu * isl
    jg.add(re0 + allb, np.arange(L.isl_re.start, L.isl_re.stop), -spb.nu)
    jg.add(im0 + allb, np.arange(L.isl_im.start, L.isl_im.stop), -spb.nu)

    g = np.empty(L.m_eq)
    g[L.kcl_re] = kcl.real
    g[L.kcl_im] = kcl.imag
    g[L.ref_row] = vi[net.ref]
    jg.add(L.ref_row.start, cvi[net.ref], 1.0)

    # inequalities h(x) <= 0
    h = np.empty(L.m_in)
    mu_of = lambda blk: mu[blk]  # noqa: E731
    vm2 = vr**2 + vi**2
    h[L.h_vmin] = net.vmin**2 - vm2
    h[L.h_vmax] = vm2 - net.vmax**2
    for blk, sign in ((L.h_vmin, -1.0), (L.h_vmax, 1.0)):
        rows = np.arange(blk.start, blk.stop)
        jh.add(rows, cvr, sign * 2 * vr)
        jh.add(rows, cvi, sign * 2 * vi)
        if need_hess:
            w = sign * 2 * mu_of(blk)
            hess.add(cvr, cvr, w)
            hess.add(cvi, cvi, w)
    cp, cq = np.arange(L.p.start, L.p.stop), np.arange(L.q.start, L.q.stop)
    h[L.h_pmin] = spb.pmin - P
    h[L.h_pmax] = P - spb.pmax
    h[L.h_qmin] = spb.qmin - Q
    h[L.h_qmax] = Q - spb.qmax
    for blk, cols, sign in ((L.h_pmin, cp, -1.0), (L.h_pmax, cp, 1.0), (L.h_qmin, cq, -1.0), (L.h_qmax, cq, 1.0)):
        jh.add(np.arange(blk.start, blk.stop), cols, sign)
    if L.n_d:
        dc = L.dd_controls
        cdd = np.arange(L.dd.start, L.dd.stop)
        h[L.h_dlo] = net.lower()[dc] - settings[dc]
        h[L.h_dhi] = settings[dc] - net.upper()[dc]
        jh.add(np.arange(L.h_dlo.start, L.h_dlo.stop), cdd, -1.0)
        jh.add(np.arange(L.h_dhi.start, L.h_dhi.stop), cdd, 1.0)
    lim = net.limited
    if len(lim):
        rate2 = net.rate[lim] ** 2
        cols = bcols[lim]
        ok = cols >= 0
        for o, blk in ((0, L.h_thf), (1, L.h_tht)):
            I, J, H = Ib[lim, o], Jb[lim, o], Hb[lim, o]
            h[blk] = (I * np.conj(I)).real - rate2
            grad = 2.0 * (np.conj(I)[:, None] * J).real
            rows = np.broadcast_to(np.arange(blk.start, blk.stop)[:, None], cols.shape)
            jh.add(rows[ok], cols[ok], grad[ok])
            if need_hess:
                Hh = 2.0 * (np.conj(J)[:, :, None] * J[:, None, :]).real + 2.0 * (np.conj(I)[:, None, None] * H).real
                Hw = mu_of(blk)[:, None, None] * Hh
                ok2 = ok[:, :, None] & ok[:, None, :]
                ci = np.broadcast_to(cols[:, :, None], Hw.shape)
                cj = np.broadcast_to(cols[:, None, :], Hw.shape)
                hess.add(ci[ok2], cj[ok2], Hw[ok2])

    # objective
    c2, c1, c0 = net.cost.T if ng else (np.zeros(0),) * 3
    f0 = float(np.sum(c2 * P**2 + c1 * P + c0))
    grad = np.zeros(L.n_x)
    grad[L.p] = net.obj_scale * (2 * c2 * P + c1)
    f = net.obj_scale * f0
    if need_hess:
        hess.add(cp, cp, net.obj_scale * 2 * c2)
    if L.n_d:
        span2 = np.array([net.controls[c].span for c in L.dd_controls]) ** 2
        dd = x[L.dd]
        f += spb.adj_weight * float(np.sum(dd**2 / span2))
        grad[L.dd] = 2 * spb.adj_weight * dd / span2
        if need_hess:
            hess.add(cdd, cdd, 2 * spb.adj_weight / span2)
    f += spb.nu * spb.k_slack * float(np.sum(np.abs(isl) ** 2))
    if need_hess:
        ci = np.arange(L.isl_re.start, L.isl_im.stop)
        hess.add(ci, ci, 2 * spb.k_slack)
    return _Eval(f0=f0, f=f, grad=grad, g=g, h=h, jg=jg, jh=jh, hess=hess)


def _coo(tr: _Triplets, shape) -> sp.csr_matrix:
    r, c, v = tr.arrays()
    return sp.csr_matrix((v, (r, c)), shape=shape)


def kkt_residual(spb: SubProblem, vec: np.ndarray, eps: float) -> np.ndarray:
    L = spb.layout
    ev = _evaluate(spb, vec, need_hess=False)
    lam, mu, s = vec[L.lam], vec[L.mu], vec[L.s]
    Jg = _coo(ev.jg, (L.m_eq, L.n_x))
    Jh = _coo(ev.jh, (L.m_in, L.n_x))
    stat = ev.grad + Jg.T @ lam + Jh.T @ mu
    x = vec[L.x]
    stat[L.isl_re] = 2 * spb.k_slack * x[L.isl_re] - lam[L.kcl_re]
    stat[L.isl_im] = 2 * spb.k_slack * x[L.isl_im] - lam[L.kcl_im]
    F = np.concatenate([stat, ev.g, ev.h + s, -mu * s + eps])
    if spb.offset is not None and spb.nu2:
        F = F - spb.nu2 * spb.offset
    bad = np.flatnonzero(~np.isfinite(F))
    if len(bad):
        raise AssemblyError(int(bad[0]))
    return F


def kkt_jacobian(spb: SubProblem, vec: np.ndarray) -> sp.csc_matrix:
    L = spb.layout
    n, me, mi = L.n_x, L.m_eq, L.m_in
    ev = _evaluate(spb, vec, need_hess=True)
    mu, s = vec[L.mu], vec[L.s]
    out = _Triplets()
    hr, hc, hv = ev.hess.arrays()
    out.add(hr, hc, hv)
    gr, gc, gv = ev.jg.arrays()
    # isl columns are replaced in the stationarity rows by the scaled -1 entries
    core = (gc < L.isl_re.start) | (gc >= L.isl_im.stop)
    out.add(gc[core], n + gr[core], gv[core])
    out.add(n + gr, gc, gv)
    nb = spb.network.n_bus
    out.add(np.arange(L.isl_re.start, L.isl_re.stop), n + L.kcl_re.start + np.arange(nb), -1.0)
    out.add(np.arange(L.isl_im.start, L.isl_im.stop), n + L.kcl_im.start + np.arange(nb), -1.0)
    ir, ic, iv = ev.jh.arrays()
    out.add(ic, n + me + ir, iv)
    out.add(n + me + ir, ic, iv)
    k = np.arange(mi)
    out.add(n + me + k, n + me + mi + k, 1.0)
    out.add(n + me + mi + k, n + me + k, -s)
    out.add(n + me + mi + k, n + me + mi + k, -mu)
    r, c, v = out.arrays()
    J = sp.csc_matrix((v, (r, c)), shape=(L.size, L.size))
    if not np.all(np.isfinite(J.data)):
        bad = J.tocoo()
        row = int(bad.row[~np.isfinite(bad.data)][0])
        raise AssemblyError(row, "jacobian")
    return J


def assemble_kkt(spb: SubProblem, theta: PrimalDualPoint, eps: float | None = None) -> KktSystem:
    """Residual and sparse Jacobian at ``theta``.

    ``eps`` defaults to the sub-problem's fixed perturbation, else 1e-8.
    """
    if theta.vec.shape != (spb.layout.size,):
        raise ValueError("point does not match the sub-problem layout")
    e = eps if eps is not None else (spb.eps if spb.eps is not None else NewtonOptions.eps_min)
    F = kkt_residual(spb, theta.vec, e)
    return KktSystem(F, kkt_jacobian(spb, theta.vec), float(np.abs(F).max(initial=0.0)))


def inequality_values(spb: SubProblem, theta: PrimalDualPoint) -> np.ndarray:
    return _evaluate(spb, theta.vec, need_hess=False).h


def generation_cost(net: Network, p: np.ndarray) -> float:
    if not net.n_gen:
        return 0.0
    c2, c1, c0 = net.cost.T
    return float(np.sum(c2 * p**2 + c1 * p + c0))


def penalized_objective(spb: SubProblem, theta: PrimalDualPoint) -> float:
    """Scaled objective of the sub-problem including all penalty terms."""
    return _evaluate(spb, theta.vec, need_hess=False).f


# ---------------------------------------------------------------------------
# Newton / interior point
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-6
    feas_tol: float = 1e-6
    max_iter: int = 50
    eps_min: float = 1e-8
    sigma: float = 0.1
    eps_power: float = 1.5  # superlinear cap gap**p on the perturbation
    gamma: float = 0.995
    beta: float = 0.5
    max_backtracks: int = 12
    armijo: float = 1e-4
    # sufficient decrease is measured against the worst of the last few residuals
    nonmonotone: int = 5
    reg_delta: float = 1e-8
    reg_growth: float = 100.0


@dataclass
class NewtonResult:
    point: PrimalDualPoint
    converged: bool
    iterations: int
    residual: float
    eps: float
    status: str  # converged | max_iter | singular | nonfinite
    history: list[dict] = field(default_factory=list)

    @property
    def best_residual(self) -> float:
        return min((h["residual"] for h in self.history), default=self.residual)


def duality_measure(layout: Layout, vec: np.ndarray) -> float:
    if layout.m_in == 0:
        return 0.0
    return float(vec[layout.mu] @ vec[layout.s]) / layout.m_in


def fraction_to_boundary(mu, dmu, s, ds, gamma: float) -> float:
    """Largest step in (0, 1] keeping ``mu`` and ``s`` above ``(1 - gamma)`` of their value."""
    alpha = 1.0
    for v, dv in ((mu, dmu), (s, ds)):
        neg = dv < 0
        if np.any(neg):
            with np.errstate(over="ignore"):  # tiny dv gives inf, which never binds
                alpha = min(alpha, float(np.min(-gamma * v[neg] / dv[neg])))
    return alpha


class SingularSystem(RuntimeError):
    pass


def _regularize(J: sp.csc_matrix, layout: Layout, delta: float) -> sp.csc_matrix:
    d = np.zeros(layout.size)
    d[: layout.n_x] = delta
    d[layout.lam] = -delta
    return (J + sp.diags(d, format="csc")).tocsc()


def solve_newton_system(J: sp.csc_matrix, rhs: np.ndarray, layout: Layout, opts: NewtonOptions) -> np.ndarray:
    """Sparse LU solve, regularizing once and then once more on singular pivots."""
    attempts = [0.0, opts.reg_delta, opts.reg_delta * opts.reg_growth]
    for delta in attempts:
        A = J if delta == 0.0 else _regularize(J, layout, delta)
        try:
            with np.errstate(all="ignore"):
                sol = spla.splu(A).solve(rhs)
        except RuntimeError:
            continue
        if np.all(np.isfinite(sol)):
            if delta:
                log.debug("newton system regularized with delta=%g", delta)
            return sol
    raise SingularSystem("singular Newton matrix")


def newton_solve(spb: SubProblem, theta0: PrimalDualPoint, opts: NewtonOptions | None = None) -> NewtonResult:
    """Damped Newton on the perturbed KKT conditions of ``spb``.

    ``eps`` follows ``max(eps_min, min(eps_prev, sigma * mu's / m))`` unless
    the sub-problem fixes it.  Steps are capped by the fraction-to-boundary
    rule on ``(mu, s)`` and backtracked on the infinity norm of the residual.
    """
    opts = opts or NewtonOptions()
    L = spb.layout
    if theta0.layout is not L:
        raise ValueError("initial point belongs to a different layout")
    vec = theta0.vec.copy()
    if np.any(vec[L.mu] <= 0) or np.any(vec[L.s] <= 0):
        raise ValueError("initial point needs strictly positive mu and s")
    eps = spb.eps if spb.eps is not None else math.inf
    history: list[dict] = []
    recent: list[float] = []
    status = "max_iter"
    rn = math.inf
    for it in range(opts.max_iter + 1):
        if spb.eps is None:
            gap = duality_measure(L, vec)
            eps = max(opts.eps_min, min(eps, opts.sigma * gap, gap**opts.eps_power))
        try:
            F = kkt_residual(spb, vec, eps)
        except AssemblyError:
            status = "nonfinite"
            break
        rn = float(np.abs(F).max(initial=0.0))
        if rn <= opts.tol and eps <= opts.eps_min * (1 + 1e-12) or (spb.eps is not None and rn <= opts.tol):
            status = "converged"
            history.append({"iter": it, "residual": rn, "alpha": 0.0, "eps": eps})
            log.debug("newton converged iter=%d residual=%.3e eps=%.1e", it, rn, eps)
            return NewtonResult(PrimalDualPoint(L, vec), True, it, rn, eps, status, history)
        if it == opts.max_iter:
            break
        try:
            J = kkt_jacobian(spb, vec)
            d = solve_newton_system(J, -F, L, opts)
        except SingularSystem:
            status = "singular"
            break
        except AssemblyError:
            status = "nonfinite"
            break
        alpha = fraction_to_boundary(vec[L.mu], d[L.mu], vec[L.s], d[L.s], opts.gamma)
        trial = vec + alpha * d
        recent.append(rn)
        ref = max(recent[-max(opts.nonmonotone, 1):])
        for _ in range(opts.max_backtracks):
            try:
                ft = float(np.abs(kkt_residual(spb, trial, eps)).max(initial=0.0))
            except AssemblyError:
                ft = math.inf
            if ft <= (1.0 - opts.armijo * alpha) * ref:
                break
            alpha *= opts.beta
            trial = vec + alpha * d
        vec = trial
        history.append({"iter": it, "residual": rn, "alpha": alpha, "eps": eps})
        log.debug("newton iter=%d residual=%.3e alpha=%.3e eps=%.1e", it, rn, alpha, eps)
    return NewtonResult(PrimalDualPoint(L, vec), False, len(history), rn, eps, status, history)
