"""Snap relaxed control values to allowed settings and build the residual R."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .kkt import SubProblem, _coo, _evaluate, kkt_residual
from .network import Layout, Network, PrimalDualPoint
from .stage1 import HomotopyOptions, base_settings, embed

log = logging.getLogger(__name__)


class SensitivityUnavailable(ArithmeticError):
    pass


def voltage_sensitivity(network: Network, theta: PrimalDualPoint, control: int) -> tuple[np.ndarray, np.ndarray]:
    """``(d vr / d d, d vi / d d)`` per bus for one control at a ``nu1 = 0`` point.

    The network equations are linearized at ``theta`` with the reference
    bus voltage, every generator injection and every other control fixed,
    and the reference-bus KCL rows dropped (the reference absorbs the
    mismatch).  Controls without an adjustment variable return zeros.
    """
    L = theta.layout
    nb = network.n_bus
    col = L.dd_of[control]
    if col < 0:
        return np.zeros(nb), np.zeros(nb)
    spb = embed(network, 0.0, layout=L)
    Jg = _coo(_evaluate(spb, theta.vec, need_hess=False).jg, (L.m_eq, L.n_x)).tocsc()
    keep = np.delete(np.arange(nb), network.ref)
    rows = np.concatenate([L.kcl_re.start + keep, L.kcl_im.start + keep])
    cols = np.concatenate([L.vr.start + keep, L.vi.start + keep])
    A = Jg[rows][:, cols].tocsc()
    b = -Jg[rows][:, [col]].toarray().ravel()
    try:
        with np.errstate(all="ignore"):
            x = spla.splu(A).solve(b)
    except RuntimeError as exc:
        raise SensitivityUnavailable("sensitivity unavailable: singular network Jacobian") from exc
    if not np.all(np.isfinite(x)):
        raise SensitivityUnavailable("sensitivity unavailable: non-finite solve")
    dvr, dvi = np.zeros(nb), np.zeros(nb)
    m = len(keep)
    dvr[keep], dvi[keep] = x[:m], x[m:]
    return dvr, dvi


def candidates(allowed: tuple[float, ...], relaxed: float, count: int = 2) -> list[float]:
    """Allowed settings nearest to ``relaxed``; ties go to the smaller value."""
    return sorted(allowed, key=lambda d: (abs(d - relaxed), d))[:count]


def voltage_margin(network: Network, v: np.ndarray) -> float:
    """Worst distance of ``|v|`` to its bounds (negative when violated)."""
    vm = np.abs(v)
    return float(np.min(np.minimum(vm - network.vmin, network.vmax - vm)))


@dataclass
class DeviceRounding:
    id: str
    relaxed: float
    candidates: list[float]
    margins: list[float | None]
    chosen: float
    fallback: bool = False  # second-nearest chosen by the screen
    flagged: bool = False  # no candidate passed; nearest kept
    screened: bool = True

    @property
    def retry_setting(self) -> float:
        """Setting used when Stage II is retried for a flagged device."""
        return self.candidates[1] if self.flagged and len(self.candidates) > 1 else self.chosen


@dataclass
class RoundingReport:
    devices: list[DeviceRounding] = field(default_factory=list)

    @property
    def chosen(self) -> np.ndarray:
        return np.array([d.chosen for d in self.devices], dtype=float)

    @property
    def n_fallback(self) -> int:
        return sum(d.fallback for d in self.devices)

    @property
    def flagged(self) -> list[int]:
        return [k for k, d in enumerate(self.devices) if d.flagged]

    def retried(self) -> "RoundingReport":
        """Copy with flagged devices moved to their fallback candidate."""
        out = []
        for d in self.devices:
            nd = DeviceRounding(**asdict(d))
            if d.flagged and len(d.candidates) > 1:
                nd.chosen, nd.flagged, nd.fallback = d.candidates[1], False, True
            out.append(nd)
        return RoundingReport(out)

    def to_json(self) -> str:
        return json.dumps({"n_fallback": self.n_fallback, "devices": [asdict(d) for d in self.devices]}, indent=1)


def relaxed_values(network: Network, theta: PrimalDualPoint, warm_start: bool = False) -> np.ndarray:
    base = base_settings(network, 0.0, warm_start)
    L = theta.layout
    d = base.copy()
    if L.n_d:
        d[L.dd_controls] += theta.vec[L.dd]
    return d


def select_settings(network: Network, theta: PrimalDualPoint, screen: bool = True, warm_start: bool = False) -> RoundingReport:
    """Nearest allowed setting per device, screened on predicted voltages.

    Each device is screened on its own against ``theta``: the predicted
    voltages ``v* + (d - d*) dv/dd`` must keep every magnitude inside its
    bounds.  The nearest and second-nearest settings are tried in that
    order; if neither passes, the nearest is kept and the device flagged.
    """
    relaxed = relaxed_values(network, theta, warm_start)
    v = theta.v
    report = RoundingReport()
    for k, ctrl in enumerate(network.controls):
        dstar = float(relaxed[k])
        cands = candidates(ctrl.allowed, dstar)
        entry = DeviceRounding(id=ctrl.id, relaxed=dstar, candidates=cands, margins=[None] * len(cands), chosen=cands[0])
        if ctrl.fixed or not screen:
            entry.screened = False
            report.devices.append(entry)
            continue
        try:
            dvr, dvi = voltage_sensitivity(network, theta, k)
        except SensitivityUnavailable:
            log.warning("device %s: sensitivity unavailable, taking nearest setting unscreened", ctrl.id)
            entry.screened = False
            report.devices.append(entry)
            continue
        dv = dvr + 1j * dvi
        passed = None
        for i, d in enumerate(cands):
            m = voltage_margin(network, v + (d - dstar) * dv)
            entry.margins[i] = m
            if passed is None and m >= 0.0:
                passed = i
        if passed is None:
            entry.flagged = True
        else:
            entry.chosen = cands[passed]
            entry.fallback = passed > 0
        report.devices.append(entry)
    return report


def fixed_subproblem(network: Network, settings: np.ndarray, eps: float, k_slack: float = HomotopyOptions.k_slack) -> SubProblem:
    """The discrete problem with every control held at ``settings``.

    ``k_slack`` must match Stage I: the (inert) slack-injection rows read
    ``2 k_slack isl - lam`` at a zero homotopy factor.
    """
    return SubProblem(
        network=network,
        layout=network.fixed_layout,
        base=np.asarray(settings, dtype=float),
        pmin=network.pmin,
        pmax=network.pmax,
        qmin=network.qmin,
        qmax=network.qmax,
        stage="II",
        nu=0.0,
        k_slack=k_slack,
        eps=eps,
    )


def reduce_point(theta: PrimalDualPoint, target: Layout) -> PrimalDualPoint:
    """Drop adjustment variables and their bound rows from a Stage I point."""
    src = theta.layout
    out = PrimalDualPoint(target)
    v, w = theta.vec, out.vec
    for name in ("vr", "vi", "p", "q", "isl_re", "isl_im"):
        w[getattr(target, name)] = v[getattr(src, name)]
    w[target.lam] = v[src.lam]
    keep = ("h_vmin", "h_vmax", "h_pmin", "h_pmax", "h_qmin", "h_qmax", "h_thf", "h_tht")
    for part in (("mu", src.mu.start, target.mu.start), ("s", src.s.start, target.s.start)):
        _, s0, t0 = part
        for name in keep:
            a, b = getattr(src, name), getattr(target, name)
            w[t0 + b.start : t0 + b.stop] = v[s0 + a.start : s0 + a.stop]
    return out


@dataclass
class ResidualVector:
    R: np.ndarray
    subproblem: SubProblem

    @property
    def norm(self) -> float:
        return float(np.abs(self.R).max(initial=0.0))


def compute_residual(
    network: Network, theta: PrimalDualPoint, report: RoundingReport, eps: float = 1e-8, k_slack: float = HomotopyOptions.k_slack
) -> tuple[PrimalDualPoint, ResidualVector]:
    """``theta'`` (settings fixed at the chosen values) and ``R = F(theta')``."""
    spb = fixed_subproblem(network, report.chosen, eps, k_slack)
    theta_p = reduce_point(theta, spb.layout)
    R = kkt_residual(spb, theta_p.vec, eps)
    return theta_p, ResidualVector(R, spb)
