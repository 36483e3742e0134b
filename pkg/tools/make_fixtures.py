"""Regenerate the bundled JSON fixtures in src/discopf/data.

The 14- and 30-bus networks use the classic IEEE test-system data (as
distributed with MATPOWER), converted to p.u. on a 100 MVA base, with
selected transformers and shunts turned into discrete controls.

    python tools/make_fixtures.py
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from discopf.case_io import (
    BranchRecord,
    BusRecord,
    CaseFile,
    GenRecord,
    LoadRecord,
    ShuntRecord,
    XfmrRecord,
    write_case_json,
)

BASE = 100.0
DATA = Path(__file__).resolve().parents[1] / "src" / "discopf" / "data"


def _cost(c2_mw: float, c1_mw: float, c0: float = 0.0) -> tuple[float, float, float]:
    """MW-based quadratic cost to a p.u. one."""
    return (c2_mw * BASE**2, c1_mw * BASE, c0)


def _grid(lo: float, hi: float, n: int) -> tuple[float, ...]:
    return tuple(round(float(v), 10) for v in np.linspace(lo, hi, n))


def t2() -> CaseFile:
    return CaseFile(
        base_mva=BASE,
        buses=(BusRecord(1, 0.95, 1.05), BusRecord(2, 0.9, 1.1)),
        generators=(GenRecord(1, 0.0, 2.0, -1.0, 1.0, _cost(0.01, 10.0), id="g1"),),
        loads=(LoadRecord(2, 0.8, 0.3),),
        branches=(BranchRecord(1, 2, 0.02, 0.08, 0.04, 0.0),),
        transformers=(),
        shunts=(),
        reference_bus=1,
        name="t2",
    )


def t4_tap(prior: float | None = 1.0, tap_set: tuple[float, ...] = (0.9, 0.95, 1.0, 1.05, 1.1), name: str = "t4_tap") -> CaseFile:
    """Four buses in a ring; one tap changer feeds the far load bus.

    Bus 3 has a wide band: with a 1.05 cap the relaxed point sits on that
    limit and the voltage screen rejects the true optimum (tap 0.95).
    """
    return CaseFile(
        base_mva=BASE,
        buses=(BusRecord(1, 0.95, 1.05), BusRecord(2, 0.9, 1.1), BusRecord(3, 0.9, 1.1), BusRecord(4, 0.9, 1.1)),
        generators=(
            GenRecord(1, 0.0, 3.0, -2.0, 2.0, _cost(0.01, 12.0), id="g1"),
            GenRecord(3, 0.0, 1.5, -1.0, 1.0, _cost(0.02, 20.0), id="g3"),
        ),
        loads=(LoadRecord(2, 0.9, 0.35), LoadRecord(4, 1.1, 0.5)),
        branches=(
            BranchRecord(1, 2, 0.01, 0.08, 0.04, 0.0),
            BranchRecord(2, 3, 0.015, 0.10, 0.03, 0.0),
            BranchRecord(3, 4, 0.02, 0.12, 0.02, 0.0),
        ),
        transformers=(XfmrRecord(1, 4, 0.004, 0.08, tap_set=tap_set, prior_tap=prior, id="T14"),),
        shunts=(),
        reference_bus=1,
        name=name,
    )


def t4_extreme() -> CaseFile:
    """t4_tap with a 0.5 tap in the set; that setting admits no feasible point."""
    return t4_tap(1.0, (0.5, 0.95, 1.0, 1.05), "t4_extreme")


def t4_screen() -> CaseFile:
    """Tap changer oriented from the load bus, with a tight floor at bus 4.

    The relaxed tap lands between two grid points and every candidate breaks
    a voltage limit by the linear prediction, so rounding takes the fallback.
    """
    base = t4_tap()
    return replace(
        base,
        buses=(BusRecord(1, 0.9, 1.0), BusRecord(2, 0.9, 1.1), BusRecord(3, 0.9, 1.1), BusRecord(4, 0.98, 1.1)),
        loads=(LoadRecord(2, 0.9, 0.35), LoadRecord(4, 0.6, 0.3)),
        transformers=(XfmrRecord(4, 1, 0.004, 0.08, tap_set=(0.9, 0.95, 1.0, 1.05, 1.1), prior_tap=1.0, id="T41"),),
        name="t4_screen",
    )


# IEEE 14-bus -----------------------------------------------------------------

_B14 = [  # id, Pd, Qd, Bs (MW, MVAr)
    (1, 0, 0, 0), (2, 21.7, 12.7, 0), (3, 94.2, 19, 0), (4, 47.8, -3.9, 0), (5, 7.6, 1.6, 0),
    (6, 11.2, 7.5, 0), (7, 0, 0, 0), (8, 0, 0, 0), (9, 29.5, 16.6, 19), (10, 9, 5.8, 0),
    (11, 3.5, 1.8, 0), (12, 6.1, 1.6, 0), (13, 13.5, 5.8, 0), (14, 14.9, 5, 0),
]
_G14 = [  # bus, Pmax, Pmin, Qmax, Qmin, c2, c1
    (1, 332.4, 0, 10, 0, 0.0430293, 20), (2, 140, 0, 50, -40, 0.25, 20), (3, 100, 0, 40, 0, 0.01, 40),
    (6, 100, 0, 24, -6, 0.01, 40), (8, 100, 0, 24, -6, 0.01, 40),
]
_L14 = [  # f, t, r, x, b, ratio
    (1, 2, 0.01938, 0.05917, 0.0528, 0), (1, 5, 0.05403, 0.22304, 0.0492, 0), (2, 3, 0.04699, 0.19797, 0.0438, 0),
    (2, 4, 0.05811, 0.17632, 0.034, 0), (2, 5, 0.05695, 0.17388, 0.0346, 0), (3, 4, 0.06701, 0.17103, 0.0128, 0),
    (4, 5, 0.01335, 0.04211, 0, 0), (4, 7, 0, 0.20912, 0, 0.978), (4, 9, 0, 0.55618, 0, 0.969),
    (5, 6, 0, 0.25202, 0, 0.932), (6, 11, 0.09498, 0.1989, 0, 0), (6, 12, 0.12291, 0.25581, 0, 0),
    (6, 13, 0.06615, 0.13027, 0, 0), (7, 8, 0, 0.17615, 0, 0), (7, 9, 0, 0.11001, 0, 0),
    (9, 10, 0.03181, 0.0845, 0, 0), (9, 14, 0.12711, 0.27038, 0, 0), (10, 11, 0.08205, 0.19207, 0, 0),
    (12, 13, 0.22092, 0.19988, 0, 0), (13, 14, 0.17093, 0.34802, 0, 0),
]


def t14() -> CaseFile:
    """IEEE 14-bus with three tap changers and a switched shunt at bus 9.

    Product of setting counts is 3 * 3 * 3 * 3 = 81 so the oracle can
    enumerate it.
    """
    buses = tuple(BusRecord(i, 0.94, 1.06, 0.0, 0.0) for i, *_ in _B14)
    loads = tuple(LoadRecord(i, pd / BASE, qd / BASE) for i, pd, qd, _ in _B14 if pd or qd)
    gens = tuple(
        GenRecord(b, pmin / BASE, pmax / BASE, qmin / BASE, qmax / BASE, _cost(c2, c1), id=f"g{b}")
        for b, pmax, pmin, qmax, qmin, c2, c1 in _G14
    )
    lines, xfmrs = [], []
    taps = {(4, 7): (0.94, 0.98, 1.02), (4, 9): (0.93, 0.97, 1.01), (5, 6): (0.91, 0.95, 0.99)}
    for f, t, r, x, b, ratio in _L14:
        if ratio:
            ts = taps[(f, t)]
            xfmrs.append(XfmrRecord(f, t, r, x, b, tap=ratio, tap_set=ts, prior_tap=ts[1], id=f"T{f}-{t}"))
        else:
            lines.append(BranchRecord(f, t, r, x, b, 0.0))
    shunts = (ShuntRecord(9, ((2, 0.095),), prior=0.19, id="SH9"),)
    return CaseFile(BASE, buses, gens, loads, tuple(lines), tuple(xfmrs), shunts, 1, "t14")


def _t14_band(tap_set: tuple[float, ...], name: str) -> CaseFile:
    base = t14()
    return replace(
        base,
        buses=tuple(replace(b, vmin=0.97, vmax=1.03) for b in base.buses),
        transformers=tuple(replace(t, tap_set=tap_set, prior_tap=1.0) for t in base.transformers),
        name=name,
    )


def t14_coarse() -> CaseFile:
    """14-bus in a 0.97-1.03 band with taps limited to {0.9, 1.0, 1.1}."""
    return _t14_band((0.9, 1.0, 1.1), "t14_coarse")


def t14_fine() -> CaseFile:
    """Same band with a 33-step tap grid (0.00625 p.u.)."""
    return _t14_band(_grid(0.9, 1.1, 33), "t14_fine")


# IEEE 30-bus (Alsac-Stott variant) ------------------------------------------

_B30 = [  # id, Pd, Qd, Bs
    (1, 0, 0, 0), (2, 21.7, 12.7, 0), (3, 2.4, 1.2, 0), (4, 7.6, 1.6, 0), (5, 0, 0, 0.19), (6, 0, 0, 0),
    (7, 22.8, 10.9, 0), (8, 30, 30, 0), (9, 0, 0, 0), (10, 5.8, 2, 0), (11, 0, 0, 0), (12, 11.2, 7.5, 0),
    (13, 0, 0, 0), (14, 6.2, 1.6, 0), (15, 8.2, 2.5, 0), (16, 3.5, 1.8, 0), (17, 9, 5.8, 0), (18, 3.2, 0.9, 0),
    (19, 9.5, 3.4, 0), (20, 2.2, 0.7, 0), (21, 17.5, 11.2, 0), (22, 0, 0, 0), (23, 3.2, 1.6, 0),
    (24, 8.7, 6.7, 0.04), (25, 0, 0, 0), (26, 3.5, 2.3, 0), (27, 0, 0, 0), (28, 0, 0, 0), (29, 2.4, 0.9, 0),
    (30, 10.6, 1.9, 0),
]
_G30 = [  # bus, Pmax, Pmin, Qmax, Qmin, c2, c1
    (1, 80, 0, 150, -20, 0.02, 2), (2, 80, 0, 60, -20, 0.0175, 1.75), (22, 50, 0, 62.5, -15, 0.0625, 1),
    (27, 55, 0, 48.7, -15, 0.00834, 3.25), (23, 30, 0, 40, -10, 0.025, 3), (13, 40, 0, 44.7, -15, 0.025, 3),
]
_L30 = [  # f, t, r, x, b, rateA
    (1, 2, 0.02, 0.06, 0.03, 130), (1, 3, 0.05, 0.19, 0.02, 130), (2, 4, 0.06, 0.17, 0.02, 65),
    (3, 4, 0.01, 0.04, 0, 130), (2, 5, 0.05, 0.2, 0.02, 130), (2, 6, 0.06, 0.18, 0.02, 65),
    (4, 6, 0.01, 0.04, 0, 90), (5, 7, 0.05, 0.12, 0.01, 70), (6, 7, 0.03, 0.08, 0.01, 130),
    (6, 8, 0.01, 0.04, 0, 32), (6, 9, 0, 0.21, 0, 65), (6, 10, 0, 0.56, 0, 32), (9, 11, 0, 0.21, 0, 65),
    (9, 10, 0, 0.11, 0, 65), (4, 12, 0, 0.26, 0, 65), (12, 13, 0, 0.14, 0, 65), (12, 14, 0.12, 0.26, 0, 32),
    (12, 15, 0.07, 0.13, 0, 32), (12, 16, 0.09, 0.2, 0, 32), (14, 15, 0.22, 0.2, 0, 16),
    (16, 17, 0.08, 0.19, 0, 16), (15, 18, 0.11, 0.22, 0, 16), (18, 19, 0.06, 0.13, 0, 16),
    (19, 20, 0.03, 0.07, 0, 32), (10, 20, 0.09, 0.21, 0, 32), (10, 17, 0.03, 0.08, 0, 32),
    (10, 21, 0.03, 0.07, 0, 32), (10, 22, 0.07, 0.15, 0, 32), (21, 22, 0.01, 0.02, 0, 32),
    (15, 23, 0.1, 0.2, 0, 16), (22, 24, 0.12, 0.18, 0, 16), (23, 24, 0.13, 0.27, 0, 16),
    (24, 25, 0.19, 0.33, 0, 16), (25, 26, 0.25, 0.38, 0, 16), (25, 27, 0.11, 0.21, 0, 16),
    (28, 27, 0, 0.4, 0, 65), (27, 29, 0.22, 0.42, 0, 16), (27, 30, 0.32, 0.6, 0, 16),
    (29, 30, 0.24, 0.45, 0, 16), (8, 28, 0.06, 0.2, 0.02, 32), (6, 28, 0.02, 0.06, 0.01, 32),
]


def t30() -> CaseFile:
    """IEEE 30-bus with four tap changers, one phase shifter and two switched shunts."""
    fixed_bs = {5: 0.19}
    buses = tuple(BusRecord(i, 0.95, 1.05, 0.0, fixed_bs.get(i, 0.0)) for i, *_ in _B30)
    loads = tuple(LoadRecord(i, pd / BASE, qd / BASE) for i, pd, qd, _ in _B30 if pd or qd)
    gens = tuple(
        GenRecord(b, pmin / BASE, pmax / BASE, qmin / BASE, qmax / BASE, _cost(c2, c1), id=f"g{b}")
        for b, pmax, pmin, qmax, qmin, c2, c1 in _G30
    )
    tap_grid = _grid(0.9, 1.1, 9)
    taps = {(6, 9): 1.0, (6, 10): 1.0, (4, 12): 1.0, (28, 27): 1.0}
    phase = {(12, 13): 0.0}
    lines, xfmrs = [], []
    for f, t, r, x, b, rate in _L30:
        if (f, t) in taps:
            xfmrs.append(XfmrRecord(f, t, r, x, b, rate / BASE, tap_set=tap_grid, prior_tap=taps[(f, t)], id=f"T{f}-{t}"))
        elif (f, t) in phase:
            xfmrs.append(
                XfmrRecord(f, t, r, x, b, rate / BASE, shift_set=_grid(-0.1, 0.1, 5), prior_shift=phase[(f, t)], id=f"P{f}-{t}")
            )
        else:
            lines.append(BranchRecord(f, t, r, x, b, rate / BASE))
    shunts = (
        ShuntRecord(10, ((4, 0.05),), prior=0.1, id="SH10"),
        ShuntRecord(24, ((2, 0.04),), prior=0.04, id="SH24"),
    )
    return CaseFile(BASE, buses, gens, loads, tuple(lines), tuple(xfmrs), shunts, 1, "t30")


FIXTURES = {
    "t2": t2,
    "t4_tap": t4_tap,
    "t4_extreme": t4_extreme,
    "t4_screen": t4_screen,
    "t14": t14,
    "t14_coarse": t14_coarse,
    "t14_fine": t14_fine,
    "t30": t30,
}


def to_raw(case: CaseFile) -> str:
    """Minimal RAW v33 rendering of a case (costs and branch ids are lost)."""
    sb = case.base_mva
    out = [f"0, {sb:.2f}, 33, 0, 0, 60.00 / {case.name}", case.name, "written by tools/make_fixtures.py"]
    for b in case.buses:
        ide = 3 if b.id == case.reference_bus else (2 if any(g.bus == b.id for g in case.generators) else 1)
        out.append(f"{b.id}, 'B{b.id}', 138.0, {ide}, 1, 1, 1, 1.0, 0.0, {b.vmax!r}, {b.vmin!r}, {b.vmax!r}, {b.vmin!r}")
    out.append("0 / END OF BUS DATA, BEGIN LOAD DATA")
    for ld in case.loads:
        out.append(f"{ld.bus}, '1', 1, 1, 1, {ld.p * sb!r}, {ld.q * sb!r}, 0.0, 0.0, 0.0, 0.0, 1, 1, 0")
    out.append("0 / END OF LOAD DATA, BEGIN FIXED SHUNT DATA")
    for b in case.buses:
        if b.gs or b.bs:
            out.append(f"{b.id}, '1', 1, {b.gs * sb!r}, {b.bs * sb!r}")
    out.append("0 / END OF FIXED SHUNT DATA, BEGIN GENERATOR DATA")
    for k, g in enumerate(case.generators):
        out.append(
            f"{g.bus}, '{k + 1}', 0.0, 0.0, {g.qmax * sb!r}, {g.qmin * sb!r}, 1.0, 0, {sb:.1f}, 0.0, 1.0, 0.0, 0.0, 1.0, 1, 100.0, "
            f"{g.pmax * sb!r}, {g.pmin * sb!r}"
        )
    out.append("0 / END OF GENERATOR DATA, BEGIN BRANCH DATA")
    for br in case.branches:
        out.append(f"{br.from_bus}, {br.to_bus}, '1', {br.r!r}, {br.x!r}, {br.b!r}, {br.rate * sb!r}, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1")
    out.append("0 / END OF BRANCH DATA, BEGIN TRANSFORMER DATA")
    for t in case.transformers:
        if t.tap_set:
            cod, rma, rmi, ntp, windv1, ang = 1, max(t.tap_set), min(t.tap_set), len(t.tap_set), t.prior_tap or t.tap, 0.0
        elif t.shift_set:
            cod, ntp, windv1 = 3, len(t.shift_set), t.tap
            rma, rmi = float(np.degrees(max(t.shift_set))), float(np.degrees(min(t.shift_set)))
            ang = float(np.degrees(t.prior_shift or t.shift))
        else:
            cod, rma, rmi, ntp, windv1, ang = 0, 1.1, 0.9, 33, t.tap, float(np.degrees(t.shift))
        out += [
            f"{t.from_bus}, {t.to_bus}, 0, '1', 1, 1, 1, 0.0, {t.b!r}, 2, '{t.id}', 1, 1, 1.0",
            f"{t.r!r}, {t.x!r}, {sb:.1f}",
            f"{windv1!r}, 0.0, {ang!r}, {t.rate * sb!r}, 0.0, 0.0, {cod}, 0, {rma!r}, {rmi!r}, 1.1, 0.9, {ntp}, 0, 0.0, 0.0, 0.0",
            "1.0, 0.0",
        ]
    out.append("0 / END OF TRANSFORMER DATA, BEGIN AREA DATA")
    for grp in ("AREA", "TWO-TERMINAL DC", "VSC DC", "IMPEDANCE CORRECTION", "MULTI-TERMINAL DC", "MULTI-SECTION LINE",
                "ZONE", "INTER-AREA TRANSFER", "OWNER", "FACTS"):
        out.append(f"0 / END OF {grp} DATA")
    for sh in case.shunts:
        blocks = ", ".join(f"{n}, {b * sb!r}" for n, b in sh.blocks)
        out.append(f"{sh.bus}, 1, 0, 1, 1.1, 0.9, 0, 100.0, '', {(sh.prior or 0.0) * sb!r}, {blocks}")
    out += ["0 / END OF SWITCHED SHUNT DATA", "0 / END OF GNE DATA", "0 / END OF INDUCTION MACHINE DATA", "Q"]
    return "\n".join(out) + "\n"


RAW_FIXTURES = {"t14": t14}


def main(argv: list[str]) -> int:
    names = argv or list(FIXTURES)
    DATA.mkdir(parents=True, exist_ok=True)
    for name in names:
        (DATA / f"{name}.json").write_text(write_case_json(FIXTURES[name]()) + "\n", encoding="utf-8")
        print(f"wrote {name}.json")
        if name in RAW_FIXTURES:
            (DATA / f"{name}.raw").write_text(to_raw(RAW_FIXTURES[name]()), encoding="utf-8")
            print(f"wrote {name}.raw")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
