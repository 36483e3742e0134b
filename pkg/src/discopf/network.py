"""Immutable solver view of a case: stamps, discrete controls and indexing.

Voltages are rectangular (``v = vr + j*vi``).  Every branch is a two-port
with a complex tap ``t = tau * exp(j*phi)`` on the from side::

    I_f = (ys + j*bc/2) / tau**2 * V_f - ys / conj(t) * V_t
    I_t = -ys / t * V_f + (ys + j*bc/2) * V_t

Plain lines are the special case ``tau = 1, phi = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .case_io import CaseFile, case_hash

TAP = "tap_ratio"
PHASE = "phase_shift_rad"
SHUNT = "shunt_susceptance_pu"

# Range below which a control is treated as a constant.
_DEGENERATE = 1e-12


@dataclass(frozen=True)
class DiscreteControl:
    id: str
    kind: str
    allowed: tuple[float, ...]
    trivial: float
    base_origin: float
    prior: float | None
    element: int  # branch index for taps/phases, shunt index for shunts

    @property
    def lower(self) -> float:
        return self.allowed[0]

    @property
    def upper(self) -> float:
        return self.allowed[-1]

    @property
    def span(self) -> float:
        return self.upper - self.lower

    @property
    def fixed(self) -> bool:
        return self.span <= _DEGENERATE

    @property
    def reference(self) -> float:
        """Setting that "% Adj" compares against (prior, else the default origin)."""
        return self.base_origin


def _clamp(v: float, lo: float, hi: float) -> float:
    return min(max(v, lo), hi)


def median_setting(allowed: tuple[float, ...]) -> float:
    """Median available setting (lower median for even counts)."""
    return allowed[(len(allowed) - 1) // 2]


def _origin(allowed: tuple[float, ...], prior: float | None, kind: str) -> float:
    lo, hi = allowed[0], allowed[-1]
    if prior is not None:
        return _clamp(prior, lo, hi)
    if kind == SHUNT:
        # all switches off
        return _clamp(0.0, lo, hi)
    return median_setting(allowed)


@dataclass(frozen=True, eq=False)
class Network:
    case: CaseFile
    bus_ids: np.ndarray
    ref: int
    vmin: np.ndarray
    vmax: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    gen_bus: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    cost: np.ndarray  # (n_gen, 3): c2, c1, c0
    load_bus: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    br_from: np.ndarray
    br_to: np.ndarray
    ys: np.ndarray
    bc: np.ndarray
    rate: np.ndarray
    tap0: np.ndarray
    shift0: np.ndarray
    is_xfmr: np.ndarray
    tap_ctrl: np.ndarray  # control index or -1
    shift_ctrl: np.ndarray
    sh_bus: np.ndarray
    sh_ctrl: np.ndarray
    controls: tuple[DiscreteControl, ...]
    obj_scale: float
    hash: str

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_gen(self) -> int:
        return len(self.gen_bus)

    @property
    def n_branch(self) -> int:
        return len(self.br_from)

    @property
    def n_controls(self) -> int:
        return len(self.controls)

    @cached_property
    def free_controls(self) -> np.ndarray:
        """Indices of controls that carry an adjustment variable."""
        return np.array([k for k, c in enumerate(self.controls) if not c.fixed], dtype=int)

    @property
    def n_d(self) -> int:
        return len(self.free_controls)

    @cached_property
    def limited(self) -> np.ndarray:
        return np.flatnonzero(self.rate > 0)

    @cached_property
    def layout(self) -> "Layout":
        """Index map with adjustment variables (relaxed problem)."""
        return Layout(self, with_adjustments=True)

    @cached_property
    def fixed_layout(self) -> "Layout":
        """Index map with every setting held constant."""
        return Layout(self, with_adjustments=False)

    def lower(self) -> np.ndarray:
        return np.array([c.lower for c in self.controls])

    def upper(self) -> np.ndarray:
        return np.array([c.upper for c in self.controls])

    def trivial(self) -> np.ndarray:
        return np.array([c.trivial for c in self.controls])

    def base_origin(self) -> np.ndarray:
        return np.array([c.base_origin for c in self.controls])

    def device_values(self, settings: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-branch tap and phase and per-shunt susceptance for control values."""
        tau = self.tap0.copy()
        phi = self.shift0.copy()
        m = self.tap_ctrl >= 0
        tau[m] = settings[self.tap_ctrl[m]]
        m = self.shift_ctrl >= 0
        phi[m] = settings[self.shift_ctrl[m]]
        bsh = settings[self.sh_ctrl] if len(self.sh_ctrl) else np.zeros(0)
        return tau, phi, bsh


def build_network(case: CaseFile) -> Network:
    """Assemble a :class:`Network` from a validated case."""
    bus_ids = np.array([b.id for b in case.buses], dtype=int)
    index = {int(b): k for k, b in enumerate(bus_ids)}
    controls: list[DiscreteControl] = []

    br_from, br_to, ys, bc, rate, tap0, shift0, is_x, tap_ctrl, shift_ctrl = ([] for _ in range(10))
    for br in case.branches:
        br_from.append(index[br.from_bus])
        br_to.append(index[br.to_bus])
        ys.append(1.0 / complex(br.r, br.x))
        bc.append(br.b)
        rate.append(br.rate)
        tap0.append(1.0)
        shift0.append(0.0)
        is_x.append(False)
        tap_ctrl.append(-1)
        shift_ctrl.append(-1)
    for k, xf in enumerate(case.transformers):
        e = len(br_from)
        name = xf.id or f"xf{k}"
        br_from.append(index[xf.from_bus])
        br_to.append(index[xf.to_bus])
        ys.append(1.0 / complex(xf.r, xf.x))
        bc.append(xf.b)
        rate.append(xf.rate)
        is_x.append(True)
        tc = sc = -1
        if xf.tap_set is not None:
            allowed = tuple(xf.tap_set)
            tc = len(controls)
            controls.append(
                DiscreteControl(
                    id=f"{name}:tap",
                    kind=TAP,
                    allowed=allowed,
                    trivial=_clamp(1.0, allowed[0], allowed[-1]),
                    base_origin=_origin(allowed, xf.prior_tap, TAP),
                    prior=xf.prior_tap,
                    element=e,
                )
            )
        if xf.shift_set is not None:
            allowed = tuple(xf.shift_set)
            sc = len(controls)
            controls.append(
                DiscreteControl(
                    id=f"{name}:shift",
                    kind=PHASE,
                    allowed=allowed,
                    trivial=_clamp(0.0, allowed[0], allowed[-1]),
                    base_origin=_origin(allowed, xf.prior_shift, PHASE),
                    prior=xf.prior_shift,
                    element=e,
                )
            )
        tap0.append(xf.tap)
        shift0.append(xf.shift)
        tap_ctrl.append(tc)
        shift_ctrl.append(sc)

    sh_bus, sh_ctrl = [], []
    for k, sh in enumerate(case.shunts):
        allowed = sh.allowed()
        sh_bus.append(index[sh.bus])
        sh_ctrl.append(len(controls))
        controls.append(
            DiscreteControl(
                id=sh.id or f"shunt{k}@{sh.bus}",
                kind=SHUNT,
                allowed=allowed,
                trivial=_clamp(0.0, allowed[0], allowed[-1]),
                base_origin=_origin(allowed, sh.prior, SHUNT),
                prior=sh.prior,
                element=k,
            )
        )

    gens = case.generators
    cost = np.array([g.cost for g in gens], dtype=float).reshape(-1, 3)
    pmax_abs = np.array([max(abs(g.pmax), abs(g.pmin), 1.0) for g in gens])
    marginal = np.abs(cost[:, 1]) + 2.0 * np.abs(cost[:, 0]) * pmax_abs if len(gens) else np.zeros(0)
    obj_scale = 1.0 / max(1.0, float(marginal.max()) if len(gens) else 1.0)

    def arr(values, dtype=float):
        return np.array(values, dtype=dtype)

    return Network(
        case=case,
        bus_ids=bus_ids,
        ref=index[case.reference_bus],
        vmin=arr([b.vmin for b in case.buses]),
        vmax=arr([b.vmax for b in case.buses]),
        gs=arr([b.gs for b in case.buses]),
        bs=arr([b.bs for b in case.buses]),
        gen_bus=arr([index[g.bus] for g in gens], int),
        pmin=arr([g.pmin for g in gens]),
        pmax=arr([g.pmax for g in gens]),
        qmin=arr([g.qmin for g in gens]),
        qmax=arr([g.qmax for g in gens]),
        cost=cost,
        load_bus=arr([index[d.bus] for d in case.loads], int),
        pd=arr([d.p for d in case.loads]),
        qd=arr([d.q for d in case.loads]),
        br_from=arr(br_from, int),
        br_to=arr(br_to, int),
        ys=arr(ys, complex),
        bc=arr(bc),
        rate=arr(rate),
        tap0=arr(tap0),
        shift0=arr(shift0),
        is_xfmr=arr(is_x, bool),
        tap_ctrl=arr(tap_ctrl, int),
        shift_ctrl=arr(shift_ctrl, int),
        sh_bus=arr(sh_bus, int),
        sh_ctrl=arr(sh_ctrl, int),
        controls=tuple(controls),
        obj_scale=obj_scale,
        hash=case_hash(case),
    )


# ---------------------------------------------------------------------------
# Stamps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BranchStamp:
    ys: complex  # series admittance
    bc: float = 0.0  # total line charging


def branch_current(stamp: BranchStamp, v_from: complex, v_to: complex, tau: float = 1.0, phi: float = 0.0) -> tuple[complex, complex]:
    """Terminal currents ``(I_f, I_t)`` flowing into the branch."""
    if not tau > 0:
        raise ValueError(f"tap ratio must be positive, got {tau}")
    I, _, _ = branch_jet(np.array([stamp.ys]), np.array([stamp.bc]), np.array([v_from]), np.array([v_to]), np.array([tau]), np.array([phi]))
    return complex(I[0, 0]), complex(I[0, 1])


def branch_jet(ys, bc, vf, vt, tau, phi):
    """Currents with first and second derivatives for a batch of branches.

    Local variable order is ``(vr_f, vi_f, vr_t, vi_t, tau, phi)``.
    Returns ``I (E, 2)``, ``J (E, 2, 6)`` and ``H (E, 2, 6, 6)``, complex.
    """
    E = len(ys)
    y0 = ys + 0.5j * bc
    a = 1.0 / tau**2
    a_t = -2.0 / tau**3
    a_tt = 6.0 / tau**4
    ejp = np.exp(1j * phi)
    b = ejp / tau  # 1/conj(t)
    c = np.conj(ejp) / tau  # 1/t
    b_t, b_tt, b_p, b_pp, b_tp = -b / tau, 2.0 * b / tau**2, 1j * b, -b, -1j * b / tau
    c_t, c_tt, c_p, c_pp, c_tp = -c / tau, 2.0 * c / tau**2, -1j * c, -c, 1j * c / tau

    I = np.empty((E, 2), dtype=complex)
    I[:, 0] = a * y0 * vf - ys * b * vt
    I[:, 1] = -ys * c * vf + y0 * vt

    J = np.zeros((E, 2, 6), dtype=complex)
    J[:, 0, 0] = a * y0
    J[:, 0, 1] = 1j * a * y0
    J[:, 0, 2] = -ys * b
    J[:, 0, 3] = -1j * ys * b
    J[:, 0, 4] = a_t * y0 * vf - ys * b_t * vt
    J[:, 0, 5] = -ys * b_p * vt
    J[:, 1, 0] = -ys * c
    J[:, 1, 1] = -1j * ys * c
    J[:, 1, 2] = y0
    J[:, 1, 3] = 1j * y0
    J[:, 1, 4] = -ys * c_t * vf
    J[:, 1, 5] = -ys * c_p * vf

    H = np.zeros((E, 2, 6, 6), dtype=complex)

    def sym(o, i, j, val):
        H[:, o, i, j] = val
        H[:, o, j, i] = val

    sym(0, 0, 4, a_t * y0)
    sym(0, 1, 4, 1j * a_t * y0)
    sym(0, 2, 4, -ys * b_t)
    sym(0, 3, 4, -1j * ys * b_t)
    sym(0, 2, 5, -ys * b_p)
    sym(0, 3, 5, -1j * ys * b_p)
    H[:, 0, 4, 4] = a_tt * y0 * vf - ys * b_tt * vt
    sym(0, 4, 5, -ys * b_tp * vt)
    H[:, 0, 5, 5] = -ys * b_pp * vt

    sym(1, 0, 4, -ys * c_t)
    sym(1, 1, 4, -1j * ys * c_t)
    sym(1, 0, 5, -ys * c_p)
    sym(1, 1, 5, -1j * ys * c_p)
    H[:, 1, 4, 4] = -ys * c_tt * vf
    sym(1, 4, 5, -ys * c_tp * vf)
    H[:, 1, 5, 5] = -ys * c_pp * vf
    return I, J, H


def injection_jet(v, s_conj, ds_conj):
    """Current ``conj(S) / conj(V)`` with derivatives.

    ``ds_conj`` is ``(E, L)``: derivative of ``conj(S)`` w.r.t. the local
    variables, whose first two entries must be ``(vr, vi)``.
    """
    E, L = ds_conj.shape
    vc = np.conj(v)
    dvc = np.zeros((E, L), dtype=complex)
    dvc[:, 0] = 1.0
    dvc[:, 1] = -1j
    I = s_conj / vc
    J = ds_conj / vc[:, None] - (s_conj / vc**2)[:, None] * dvc
    outer = ds_conj[:, :, None] * dvc[:, None, :]
    H = -(outer + outer.transpose(0, 2, 1)) / (vc**2)[:, None, None] + (2.0 * s_conj / vc**3)[:, None, None] * dvc[:, :, None] * dvc[:, None, :]
    return I, J, H


# ---------------------------------------------------------------------------
# Indexing
# ---------------------------------------------------------------------------


class Layout:
    """Positions of every primal and dual quantity in the flat vector.

    Primal order: ``vr, vi, p, q, dd, isl_re, isl_im``.  Equality rows:
    real KCL, imaginary KCL, reference angle.  Inequality rows:
    ``vmin, vmax, pmin, pmax, qmin, qmax, dlo, dhi, therm_f, therm_t``.
    The flat vector is ``[x, lam, mu, s]``.
    """

    def __init__(self, net: Network, with_adjustments: bool):
        nb, ng = net.n_bus, net.n_gen
        self.with_adjustments = with_adjustments
        self.dd_controls = net.free_controls if with_adjustments else np.zeros(0, dtype=int)
        nd = len(self.dd_controls)
        nl = len(net.limited)
        self.n_d = nd
        self.dd_of = np.full(net.n_controls, -1, dtype=int)

        pos = 0

        def take(n):
            nonlocal pos
            s = slice(pos, pos + n)
            pos += n
            return s

        self.vr, self.vi = take(nb), take(nb)
        self.p, self.q = take(ng), take(ng)
        self.dd = take(nd)
        self.isl_re, self.isl_im = take(nb), take(nb)
        self.n_x = pos
        self.dd_of[self.dd_controls] = np.arange(self.dd.start, self.dd.stop)

        pos = 0
        self.kcl_re, self.kcl_im, self.ref_row = take(nb), take(nb), take(1)
        self.m_eq = pos

        pos = 0
        self.h_vmin, self.h_vmax = take(nb), take(nb)
        self.h_pmin, self.h_pmax = take(ng), take(ng)
        self.h_qmin, self.h_qmax = take(ng), take(ng)
        self.h_dlo, self.h_dhi = take(nd), take(nd)
        self.h_thf, self.h_tht = take(nl), take(nl)
        self.m_in = pos

        self.x = slice(0, self.n_x)
        self.lam = slice(self.n_x, self.n_x + self.m_eq)
        self.mu = slice(self.lam.stop, self.lam.stop + self.m_in)
        self.s = slice(self.mu.stop, self.mu.stop + self.m_in)
        self.size = self.s.stop

    def blocks(self) -> dict[str, slice]:
        """Named column blocks of the flat vector (variable classes)."""
        off_l, off_m, off_s = self.lam.start, self.mu.start, self.s.start
        return {
            "vr": self.vr,
            "vi": self.vi,
            "p": self.p,
            "q": self.q,
            "dd": self.dd,
            "isl": slice(self.isl_re.start, self.isl_im.stop),
            "lam": slice(off_l, off_l + self.m_eq),
            "mu": slice(off_m, off_m + self.m_in),
            "s": slice(off_s, off_s + self.m_in),
        }

    def row_blocks(self) -> dict[str, slice]:
        """Named row blocks of the KKT residual."""
        n, me, mi = self.n_x, self.m_eq, self.m_in
        return {
            "stationarity": slice(0, n),
            "equality": slice(n, n + me),
            "inequality": slice(n + me, n + me + mi),
            "complementarity": slice(n + me + mi, n + me + 2 * mi),
        }


class PrimalDualPoint:
    """Flat iterate ``[x, lam, mu, s]`` with named views."""

    __slots__ = ("layout", "vec")

    def __init__(self, layout: Layout, vec: np.ndarray | None = None):
        self.layout = layout
        self.vec = np.zeros(layout.size) if vec is None else np.asarray(vec, dtype=float)
        if self.vec.shape != (layout.size,):
            raise ValueError(f"point has length {self.vec.shape}, layout needs {layout.size}")

    def copy(self) -> "PrimalDualPoint":
        return PrimalDualPoint(self.layout, self.vec.copy())

    _VIEWS = frozenset({"vr", "vi", "p", "q", "dd", "isl_re", "isl_im", "x", "lam", "mu", "s"})

    def __getattr__(self, name):
        if name not in PrimalDualPoint._VIEWS:
            raise AttributeError(name)
        return self.vec[getattr(self.layout, name)]

    @property
    def v(self) -> np.ndarray:
        return self.vr + 1j * self.vi
