"""Independent verification tools.

``DenseBarrierOpf`` solves the fixed-setting AC-OPF with a plain primal
log-barrier method on a dense power-balance formulation.  It is built
straight from the :class:`CaseFile` and shares no assembly code with the
main solver (derivatives come from JAX automatic differentiation).
``enumerate_optimum`` runs it over every combination of discrete settings.
``check_derivatives`` compares the main solver's analytic KKT Jacobian
against central differences of its residual.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jax
import numpy as np

jax.config.update("jax_enable_x64", True)
import jax.numpy as jnp  # noqa: E402

from .case_io import CaseFile, case_hash  # noqa: E402

log = logging.getLogger(__name__)

ENUMERATION_GUARD = 100_000


class OracleError(RuntimeError):
    pass


class GuardExceeded(OracleError):
    def __init__(self, count: int, guard: int):
        super().__init__(f"refusing to enumerate {count} setting combinations (guard {guard})")
        self.count = count
        self.guard = guard


@dataclass(frozen=True)
class Device:
    id: str
    allowed: tuple[float, ...]


def case_devices(case: CaseFile) -> list[Device]:
    """Discrete devices of a case in a fixed order: transformers (tap, shift), then shunts."""
    out = []
    for k, xf in enumerate(case.transformers):
        name = xf.id or f"xf{k}"
        if xf.tap_set is not None:
            out.append(Device(f"{name}:tap", tuple(xf.tap_set)))
        if xf.shift_set is not None:
            out.append(Device(f"{name}:shift", tuple(xf.shift_set)))
    for k, sh in enumerate(case.shunts):
        out.append(Device(sh.id or f"shunt{k}@{sh.bus}", sh.allowed()))
    return out


@dataclass
class OpfResult:
    converged: bool
    objective: float
    vm: np.ndarray
    va: np.ndarray
    p: np.ndarray
    q: np.ndarray
    iterations: int
    message: str = ""


class DenseBarrierOpf:
    """Fixed-setting AC-OPF, power-balance form, rectangular voltages.

    Primal variables ``x = [vr, vi, p, q]``.  Equalities are the complex
    power balance at each bus plus ``vi[ref] = 0``; inequalities (voltage
    magnitude, generator boxes, squared branch current) are handled by a
    log barrier ``f(x) - mu sum log(-h(x))`` whose equality-constrained
    centering problems are solved by infeasible-start Newton.
    """

    def __init__(self, case: CaseFile, gap_tol: float = 1e-10, center_tol: float = 1e-9, mu_shrink: float = 0.1, max_center_iter: int = 100):
        self.case = case
        self.devices = case_devices(case)
        self.gap_tol = gap_tol
        self.center_tol = center_tol
        self.mu_shrink = mu_shrink
        self.max_center_iter = max_center_iter
        self._build()

    # -- data -------------------------------------------------------------
    def _build(self):
        c = self.case
        idx = {b.id: k for k, b in enumerate(c.buses)}
        n = len(c.buses)
        self.n = n
        self.ref = idx[c.reference_bus]
        dev_pos = {d.id: k for k, d in enumerate(self.devices)}
        f, t, y, bsh, rate, tap, shf, tap_dev, shf_dev = ([] for _ in range(9))
        for br in c.branches:
            f.append(idx[br.from_bus]); t.append(idx[br.to_bus])
            y.append(1 / complex(br.r, br.x)); bsh.append(br.b); rate.append(br.rate)
            tap.append(1.0); shf.append(0.0); tap_dev.append(-1); shf_dev.append(-1)
        for k, xf in enumerate(c.transformers):
            name = xf.id or f"xf{k}"
            f.append(idx[xf.from_bus]); t.append(idx[xf.to_bus])
            y.append(1 / complex(xf.r, xf.x)); bsh.append(xf.b); rate.append(xf.rate)
            tap.append(xf.tap); shf.append(xf.shift)
            tap_dev.append(dev_pos.get(f"{name}:tap", -1) if xf.tap_set is not None else -1)
            shf_dev.append(dev_pos.get(f"{name}:shift", -1) if xf.shift_set is not None else -1)
        self.f, self.t = np.array(f, int), np.array(t, int)
        self.y, self.bsh = np.array(y, complex), np.array(bsh, float)
        self.rate = np.array(rate, float)
        self.tap_fixed, self.shift_fixed = np.array(tap, float), np.array(shf, float)
        self.tap_dev, self.shift_dev = np.array(tap_dev, int), np.array(shf_dev, int)
        self.gsh = np.array([b.gs for b in c.buses], float)
        self.bsh_bus = np.array([b.bs for b in c.buses], float)
        self.sh_bus = np.array([idx[s.bus] for s in c.shunts], int)
        self.sh_dev = np.array([dev_pos[s.id or f"shunt{k}@{s.bus}"] for k, s in enumerate(c.shunts)], int)
        sd = np.zeros(n, complex)
        for ld in c.loads:
            sd[idx[ld.bus]] += complex(ld.p, ld.q)
        self.sd = sd
        g = c.generators
        self.ng = len(g)
        self.gbus = np.array([idx[x.bus] for x in g], int)
        self.cost = np.array([x.cost for x in g], float).reshape(-1, 3)
        self.pmin = np.array([x.pmin for x in g], float)
        self.pmax = np.array([x.pmax for x in g], float)
        self.qmin = np.array([x.qmin for x in g], float)
        self.qmax = np.array([x.qmax for x in g], float)
        self.vmin = np.array([b.vmin for b in c.buses], float)
        self.vmax = np.array([b.vmax for b in c.buses], float)
        c2, c1, c0 = self.cost.T if self.ng else (np.zeros(0),) * 3
        big = np.maximum(np.abs(self.pmax), np.abs(self.pmin))
        self.scale = 1.0 / max(1.0, float(np.sum(np.abs(c2) * big**2 + np.abs(c1) * big + np.abs(c0))))
        self.lim = np.flatnonzero(self.rate > 0)
        self._compile()

    # -- model ------------------------------------------------------------
    def _taps(self, d):
        tap = jnp.where(self.tap_dev >= 0, d[np.maximum(self.tap_dev, 0)] if len(self.devices) else 1.0, self.tap_fixed)
        phi = jnp.where(self.shift_dev >= 0, d[np.maximum(self.shift_dev, 0)] if len(self.devices) else 0.0, self.shift_fixed)
        return tap, phi

    def _unpack(self, x):
        n, ng = self.n, self.ng
        return x[:n] + 1j * x[n : 2 * n], x[2 * n : 2 * n + ng], x[2 * n + ng :]

    def _flows(self, V, d):
        tap, phi = self._taps(d)
        tc = tap * jnp.exp(1j * phi)
        ytt = self.y + 0.5j * self.bsh
        Vf, Vt = V[self.f], V[self.t]
        If = ytt / tap**2 * Vf - self.y / jnp.conj(tc) * Vt
        It = -self.y / tc * Vf + ytt * Vt
        return If, It

    def _balance(self, x, d):
        V, p, q = self._unpack(x)
        If, It = self._flows(V, d)
        ysh = jnp.asarray(self.gsh + 1j * self.bsh_bus)
        if len(self.sh_bus):
            ysh = ysh.at[self.sh_bus].add(1j * d[self.sh_dev])
        I = ysh * V
        I = I.at[self.f].add(If).at[self.t].add(It)
        sg = jnp.zeros(self.n, complex).at[self.gbus].add(p + 1j * q)
        mis = V * jnp.conj(I) + self.sd - sg
        return jnp.concatenate([mis.real, mis.imag, jnp.atleast_1d(x[self.n + self.ref])])

    def _ineq(self, x, d):
        V, p, q = self._unpack(x)
        vm2 = V.real**2 + V.imag**2
        parts = [self.vmin**2 - vm2, vm2 - self.vmax**2, self.pmin - p, p - self.pmax, self.qmin - q, q - self.qmax]
        if len(self.lim):
            If, It = self._flows(V, d)
            r2 = self.rate[self.lim] ** 2
            parts += [jnp.abs(If[self.lim]) ** 2 - r2, jnp.abs(It[self.lim]) ** 2 - r2]
        return jnp.concatenate(parts)

    def _cost(self, x):
        _, p, _ = self._unpack(x)
        if not self.ng:
            return jnp.zeros(())
        c2, c1, c0 = self.cost.T
        return jnp.sum(c2 * p**2 + c1 * p + c0)

    def _compile(self):
        def barrier(x, t, d):
            return self.scale * self._cost(x) - t * jnp.sum(jnp.log(-self._ineq(x, d)))

        def lagr(x, y, t, d):
            return barrier(x, t, d) + jnp.dot(y, self._balance(x, d))

        self._g = jax.jit(self._balance)
        self._h = jax.jit(self._ineq)
        self._jg = jax.jit(jax.jacfwd(self._balance))
        self._grad = jax.jit(jax.grad(barrier))
        self._hess = jax.jit(jax.hessian(lagr))
        self._f = jax.jit(self._cost)

    # -- solve ------------------------------------------------------------
    def settings_vector(self, settings: dict[str, float] | None) -> np.ndarray:
        settings = settings or {}
        out = []
        for dv in self.devices:
            if dv.id in settings:
                out.append(float(settings[dv.id]))
            else:
                raise OracleError(f"no setting given for device {dv.id}")
        return np.array(out, float)

    def start(self) -> np.ndarray:
        vm = np.where((self.vmin < 1.0) & (1.0 < self.vmax), 1.0, 0.5 * (self.vmin + self.vmax))
        return np.concatenate([vm, np.zeros(self.n), 0.5 * (self.pmin + self.pmax), 0.5 * (self.qmin + self.qmax)])

    def _residual(self, x, y, t, d):
        gr = np.asarray(self._grad(x, t, d)) + np.asarray(self._jg(x, d)).T @ y
        return np.concatenate([gr, np.asarray(self._g(x, d))])

    def solve(self, settings: dict[str, float] | None = None) -> OpfResult:
        d = self.settings_vector(settings)
        x = self.start()
        if np.any(np.asarray(self._h(x, d)) >= 0):
            return self._fail(x, 0, "start point not strictly inside the inequality constraints")
        neq = 2 * self.n + 1
        nx = x.size
        y = np.zeros(neq)
        m = int(np.asarray(self._h(x, d)).size)
        t = 1.0  # barrier weight mu
        total = 0
        while True:
            for it in range(self.max_center_iter):
                r = self._residual(x, y, t, d)
                rn = np.linalg.norm(r)
                if rn <= self.center_tol:
                    break
                K = np.zeros((nx + neq, nx + neq))
                K[:nx, :nx] = np.asarray(self._hess(x, y, t, d))
                Jg = np.asarray(self._jg(x, d))
                K[:nx, nx:] = Jg.T
                K[nx:, :nx] = Jg
                try:
                    step = np.linalg.solve(K, -r)
                except np.linalg.LinAlgError:
                    return self._fail(x, total, "singular Newton matrix")
                dx, dy = step[:nx], step[nx:]
                alpha = 1.0
                while alpha > 1e-12:
                    xn, yn = x + alpha * dx, y + alpha * dy
                    if np.all(np.asarray(self._h(xn, d)) < 0):
                        rn_new = np.linalg.norm(self._residual(xn, yn, t, d))
                        if np.isfinite(rn_new) and rn_new <= (1 - 0.01 * alpha) * rn:
                            break
                    alpha *= 0.5
                else:
                    if rn <= 1e3 * self.center_tol:
                        break  # rounding floor
                    return self._fail(x, total, f"line search failed at mu={t:.3g}, residual {rn:.3e}")
                x, y = xn, yn
                total += 1
            else:
                return self._fail(x, total, f"centering did not converge at mu={t:.3g}")
            if m * t <= self.gap_tol:
                break
            t *= self.mu_shrink
        return self._result(x, total)

    def _result(self, x, iters, converged=True, message=""):
        V, p, q = self._unpack(np.asarray(x))
        V = np.asarray(V)
        obj = float(self._f(x)) if converged else math.nan
        return OpfResult(converged, obj, np.abs(V), np.angle(V), np.asarray(p), np.asarray(q), iters, message)

    def _fail(self, x, iters, message):
        log.debug("oracle OPF failed: %s", message)
        return self._result(x, iters, converged=False, message=message)


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------


@dataclass
class OracleRow:
    settings: list[float]
    feasible: bool
    objective: float
    iterations: int
    message: str = ""


@dataclass
class Enumeration:
    case_hash: str
    device_ids: list[str]
    table: list[OracleRow] = field(default_factory=list)

    @property
    def best(self) -> OracleRow | None:
        feas = [r for r in self.table if r.feasible]
        # first minimum in lexicographic combination order
        return min(feas, key=lambda r: r.objective) if feas else None

    @property
    def best_settings(self) -> dict[str, float] | None:
        b = self.best
        return None if b is None else dict(zip(self.device_ids, b.settings))

    @property
    def best_objective(self) -> float:
        b = self.best
        return math.nan if b is None else b.objective

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*self.device_ids, "feasible", "objective", "iterations", "message"])
        for r in self.table:
            w.writerow([*(repr(v) for v in r.settings), str(r.feasible).lower(), repr(r.objective), r.iterations, r.message])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"case_hash": self.case_hash, "device_ids": self.device_ids, "table": [asdict(r) for r in self.table]})

    @classmethod
    def from_json(cls, text: str) -> "Enumeration":
        doc = json.loads(text)
        return cls(doc["case_hash"], doc["device_ids"], [OracleRow(**r) for r in doc["table"]])


def combination_count(case: CaseFile) -> int:
    return math.prod(len(d.allowed) for d in case_devices(case))


def enumerate_optimum(case, solver=None, guard: int = ENUMERATION_GUARD, cache_dir: str | Path | None = None) -> Enumeration:
    """Solve the fixed-setting OPF for every combination of discrete settings.

    ``case`` may be a :class:`CaseFile` or anything with a ``.case``
    attribute (a Network).  ``solver(settings_dict) -> OpfResult`` defaults
    to :class:`DenseBarrierOpf`.  Results are cached as JSON keyed by the
    case hash when ``cache_dir`` is given.
    """
    case = getattr(case, "case", case)
    devices = case_devices(case)
    count = math.prod(len(d.allowed) for d in devices)
    if count > guard:
        raise GuardExceeded(count, guard)
    key = case_hash(case)
    path = Path(cache_dir) / f"oracle_{key}.json" if cache_dir is not None else None
    if path is not None and path.exists():
        cached = Enumeration.from_json(path.read_text())
        if cached.case_hash == key:
            return cached
    if solver is None:
        solver = DenseBarrierOpf(case).solve
    out = Enumeration(key, [d.id for d in devices])
    for combo in itertools.product(*(d.allowed for d in devices)):
        res = solver(dict(zip(out.device_ids, combo)))
        out.table.append(
            OracleRow([float(v) for v in combo], bool(res.converged), float(res.objective) if res.converged else math.nan, int(res.iterations), res.message)
        )
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(out.to_json())
    return out


# ---------------------------------------------------------------------------
# Derivative check
# ---------------------------------------------------------------------------

# Rows / (row, column) pairs that are at most quadratic in the perturbed
# variable, so central differences are exact up to rounding.
_EXACT_COLS = ("lam", "mu", "s")
_EXACT_ROWS = ("h_vmin", "h_vmax", "h_pmin", "h_pmax", "h_qmin", "h_qmax", "h_dlo", "h_dhi", "complementarity")
_EXACT_PAIRS = {("equality", "p"), ("equality", "q"), ("equality", "isl"), ("stationarity", "isl"),
                ("h_thf", "vr"), ("h_thf", "vi"), ("h_tht", "vr"), ("h_tht", "vi")}


@dataclass
class DerivativeReport:
    worst: float
    worst_exact: float
    blocks: dict[str, float]
    worst_entry: tuple[int, int] = (-1, -1)

    def passed(self, tol: float = 1e-6, tol_exact: float = 1e-10) -> bool:
        return self.worst <= tol and self.worst_exact <= tol_exact


def _row_kinds(layout) -> np.ndarray:
    """Per residual row: block name, with inequality rows split by constraint kind."""
    names = np.empty(layout.size, dtype=object)
    for name, sl in layout.row_blocks().items():
        names[sl] = name
    h0 = layout.n_x + layout.m_eq
    for name in ("h_vmin", "h_vmax", "h_pmin", "h_pmax", "h_qmin", "h_qmax", "h_dlo", "h_dhi", "h_thf", "h_tht"):
        sl = getattr(layout, name)
        names[h0 + sl.start : h0 + sl.stop] = name
    return names


def column_groups(pattern, columns: np.ndarray) -> list[np.ndarray]:
    """Greedy partition of ``columns`` into sets that share no nonzero row."""
    pattern = pattern.tocsc()
    rows_of = {int(j): pattern.indices[pattern.indptr[j] : pattern.indptr[j + 1]] for j in columns}
    groups: list[list[int]] = []
    used: list[set[int]] = []
    for j in columns:
        rj = set(rows_of[int(j)].tolist())
        for g, taken in zip(groups, used):
            if taken.isdisjoint(rj):
                g.append(int(j))
                taken |= rj
                break
        else:
            groups.append([int(j)])
            used.append(set(rj))
    return [np.array(g, dtype=int) for g in groups]


def check_derivatives(spb, vec: np.ndarray, h: float | None = None, eps: float = 1e-6, h_exact: float = 1e-2) -> DerivativeReport:
    """Worst relative error between the analytic KKT Jacobian and central differences.

    Columns that share no nonzero row of the analytic Jacobian are perturbed
    together; every row of each difference quotient is compared with the sum
    of the analytic entries in the group, ``|fd_i - sum_j J_ij| / max(1, |.|)``.
    A derivative missing from the analytic matrix therefore still shows up.
    Entries at most quadratic in the perturbed variables are differenced
    with the larger step ``h_exact`` and reported separately.
    """
    from .kkt import kkt_jacobian, kkt_residual

    L = spb.layout
    h = 1e-5 if h is None else h
    Jsp = kkt_jacobian(spb, vec).tocsc()
    Jsp.eliminate_zeros()
    pattern = Jsp != 0
    cols = L.blocks()
    rows = _row_kinds(L)
    col_kind = np.empty(L.size, dtype=object)
    for name, sl in cols.items():
        col_kind[sl] = name
    exact_col = np.isin(col_kind, _EXACT_COLS)
    groups = column_groups(pattern, np.flatnonzero(exact_col)) + column_groups(pattern, np.flatnonzero(~exact_col))

    blocks: dict[str, float] = {}
    worst = worst_exact = 0.0
    where = (-1, -1)
    for g in groups:
        g_exact = bool(exact_col[g[0]])
        direction = np.zeros(L.size)
        direction[g] = 1.0
        quot = {}
        for step in (h_exact,) if g_exact else (h, h_exact):
            fp = kkt_residual(spb, vec + step * direction, eps)
            fm = kkt_residual(spb, vec - step * direction, eps)
            quot[step] = (fp - fm) / (2 * step)
        sub = Jsp[:, g]
        expect = np.asarray(sub.sum(axis=1)).ravel()
        # column responsible for each row (at most one per group by construction);
        # rows without an analytic entry are judged at the nonlinear step
        owner = np.full(L.size, -1)
        coo = sub.tocoo()
        owner[coo.row] = g[coo.col]
        check = np.flatnonzero((expect != 0) | (quot[h_exact] != 0) | (quot[h_exact if g_exact else h] != 0))
        for i in check:
            j = int(owner[i])
            cname = col_kind[j] if j >= 0 else col_kind[g[0]]
            ex = g_exact or (j >= 0 and (rows[i] in _EXACT_ROWS or (rows[i], cname) in _EXACT_PAIRS))
            fd = quot[h_exact] if ex else quot[h]
            err = abs(fd[i] - expect[i]) / max(1.0, abs(expect[i]))
            key = f"{rows[i]}/{cname}"
            blocks[key] = max(blocks.get(key, 0.0), err)
            if ex:
                worst_exact = max(worst_exact, err)
            elif err > worst:
                worst, where = err, (int(i), j)
    return DerivativeReport(worst, worst_exact, blocks, where)


def random_interior_point(spb, rng: np.random.Generator):
    """Random ``theta`` with ``mu, s > 0`` and adjustments strictly inside their bounds."""
    from .network import PrimalDualPoint

    L = spb.layout
    net = spb.network
    pt = PrimalDualPoint(L)
    v = pt.vec
    nb = net.n_bus
    vm = rng.uniform(0.9, 1.1, nb)
    va = rng.uniform(-0.3, 0.3, nb)
    v[L.vr], v[L.vi] = vm * np.cos(va), vm * np.sin(va)
    v[L.p] = rng.uniform(spb.pmin, spb.pmax)
    v[L.q] = rng.uniform(spb.qmin, spb.qmax)
    if L.n_d:
        dc = L.dd_controls
        lo, hi = net.lower()[dc] - spb.base[dc], net.upper()[dc] - spb.base[dc]
        v[L.dd] = lo + (hi - lo) * rng.uniform(0.05, 0.95, len(dc))
    v[L.isl_re] = rng.normal(0.0, 0.1, nb)
    v[L.isl_im] = rng.normal(0.0, 0.1, nb)
    v[L.lam] = rng.normal(0.0, 1.0, L.lam.stop - L.lam.start)
    v[L.mu] = rng.uniform(0.1, 2.0, L.mu.stop - L.mu.start)
    v[L.s] = rng.uniform(0.1, 2.0, L.s.stop - L.s.start)
    return pt
