"""PSS/E RAW v33 reader for the record groups the solver needs.

Supported groups: BUS, LOAD, FIXED SHUNT, GENERATOR, BRANCH, TRANSFORMER
(2-winding only) and SWITCHED SHUNT.  Records of any other group are skipped
with a :class:`RawWarning`.  MW/MVAr quantities are converted to per-unit on
the case base and angles to radians.

Generator cost data is not part of RAW; every generator gets the linear
cost ``1.0 * P`` (P in p.u.) unless the caller replaces it.
"""

from __future__ import annotations

import csv
import math
import shlex
import warnings
from collections import defaultdict

import numpy as np

from .case_io import (
    BranchRecord,
    BusRecord,
    CaseError,
    CaseFile,
    GenRecord,
    LoadRecord,
    ShuntRecord,
    XfmrRecord,
    validate_case,
)


class RawWarning(UserWarning):
    pass


# v33 group order after the three header lines.
_GROUPS = [
    "BUS",
    "LOAD",
    "FIXED SHUNT",
    "GENERATOR",
    "BRANCH",
    "TRANSFORMER",
    "AREA",
    "TWO-TERMINAL DC",
    "VSC DC",
    "IMPEDANCE CORRECTION",
    "MULTI-TERMINAL DC",
    "MULTI-SECTION LINE",
    "ZONE",
    "INTER-AREA TRANSFER",
    "OWNER",
    "FACTS",
    "SWITCHED SHUNT",
    "GNE",
    "INDUCTION MACHINE",
]
_SUPPORTED = {"BUS", "LOAD", "FIXED SHUNT", "GENERATOR", "BRANCH", "TRANSFORMER", "SWITCHED SHUNT"}


def _strip_comment(line: str) -> str:
    in_quote = False
    for k, ch in enumerate(line):
        if ch == "'":
            in_quote = not in_quote
        elif ch == "/" and not in_quote:
            return line[:k]
    if in_quote:
        raise ValueError("unterminated quoted string")
    return line


def _split_record(line: str, lineno: int) -> list[str]:
    """Split one record, honouring single quotes and trailing ``/`` comments."""
    try:
        body = _strip_comment(line)
    except ValueError as exc:
        raise CaseError(str(exc), line=lineno) from None
    if "," in body:
        row = next(csv.reader([body], quotechar="'", skipinitialspace=True))
        return [t.strip() for t in row]
    return shlex.split(body.replace("'", '"'))


class _Fields:
    """Positional field access with defaults and line-numbered errors."""

    def __init__(self, tokens: list[str], lineno: int, group: str):
        self.tokens = tokens
        self.lineno = lineno
        self.group = group

    def _raw(self, i: int):
        if i < len(self.tokens) and self.tokens[i] != "":
            return self.tokens[i]
        return None

    def int(self, i: int, default: int | None = None) -> int:
        v = self._raw(i)
        if v is None:
            if default is None:
                raise CaseError(f"{self.group} record: missing field {i + 1}", line=self.lineno)
            return default
        try:
            return int(float(v))
        except ValueError:
            raise CaseError(f"{self.group} record: field {i + 1} is not an integer: {v!r}", line=self.lineno) from None

    def float(self, i: int, default: float | None = None) -> float:
        v = self._raw(i)
        if v is None:
            if default is None:
                raise CaseError(f"{self.group} record: missing field {i + 1}", line=self.lineno)
            return default
        try:
            x = float(v)
        except ValueError:
            raise CaseError(f"{self.group} record: field {i + 1} is not a number: {v!r}", line=self.lineno) from None
        if not math.isfinite(x):
            raise CaseError(f"{self.group} record: field {i + 1} is not finite", line=self.lineno)
        return x

    def str(self, i: int, default: str = "") -> str:
        v = self._raw(i)
        return default if v is None else v


def _is_group_end(line: str) -> bool:
    s = line.strip()
    return s == "0" or s.startswith("0 ") or s.startswith("0/") or s.startswith("0,")


def parse_raw_subset(text: str, name: str = "") -> CaseFile:
    """Parse a RAW v33 document into a validated :class:`CaseFile`."""
    if not text.strip():
        raise CaseError("empty RAW document", line=1)
    lines = text.splitlines()
    if len(lines) < 3:
        raise CaseError("RAW document needs three header lines", line=len(lines))
    head = _Fields(_split_record(lines[0], 1), 1, "CASE ID")
    base_mva = head.float(1, 100.0)
    rev = head.int(2, 33)
    if rev not in (0, 33):
        warnings.warn(f"RAW revision {rev} read with the v33 layout", RawWarning, stacklevel=2)
    if base_mva <= 0:
        raise CaseError("SBASE must be positive", line=1)

    records: dict[str, list[tuple[int, list[str]]]] = defaultdict(list)
    group_idx = 0
    i = 3
    while i < len(lines):
        line = lines[i]
        lineno = i + 1
        i += 1
        if not line.strip() or line.lstrip().startswith("@"):
            continue
        if line.strip().upper().startswith("Q"):
            break
        if _is_group_end(line):
            group_idx += 1
            continue
        if group_idx >= len(_GROUPS):
            raise CaseError("data after the last record group", line=lineno)
        group = _GROUPS[group_idx]
        tokens = _split_record(line, lineno)
        if group == "TRANSFORMER":
            # 4 lines for two-winding, 5 for three-winding
            flds = _Fields(tokens, lineno, group)
            k = flds.int(2, 0)
            if k != 0:
                raise CaseError("unsupported: 3-winding transformer", line=lineno)
            if i + 3 > len(lines):
                raise CaseError("truncated transformer record", line=lineno)
            block = [tokens] + [_split_record(lines[i + j], i + j + 1) for j in range(3)]
            i += 3
            records[group].append((lineno, block))
        else:
            records[group].append((lineno, tokens))

    for group, recs in records.items():
        if group not in _SUPPORTED and recs:
            warnings.warn(f"skipped {len(recs)} {group} record(s)", RawWarning, stacklevel=2)

    buses: list[BusRecord] = []
    gs_extra: dict[int, float] = defaultdict(float)
    bs_extra: dict[int, float] = defaultdict(float)
    ref_bus = None
    isolated: set[int] = set()
    bus_raw = []
    for lineno, tok in records["BUS"]:
        f = _Fields(tok, lineno, "BUS")
        bid = f.int(0)
        ide = f.int(3, 1)
        if ide == 4:
            isolated.add(bid)
            continue
        if ide == 3 and ref_bus is None:
            ref_bus = bid
        bus_raw.append((bid, f.float(9, 1.1), f.float(10, 0.9)))
    if ref_bus is None:
        raise CaseError("no swing bus (IDE=3) in BUS data", line=4)
    if isolated:
        warnings.warn(f"dropped {len(isolated)} isolated bus(es) and their equipment", RawWarning, stacklevel=2)

    def live(*bus_ids: int) -> bool:
        return not any(b in isolated for b in bus_ids)

    loads: list[LoadRecord] = []
    for lineno, tok in records["LOAD"]:
        f = _Fields(tok, lineno, "LOAD")
        bus, status = f.int(0), f.int(2, 1)
        if status == 0 or not live(bus):
            continue
        pl, ql = f.float(5, 0.0), f.float(6, 0.0)
        ip, iq = f.float(7, 0.0), f.float(8, 0.0)
        yp, yq = f.float(9, 0.0), f.float(10, 0.0)
        if ip or iq:
            warnings.warn(f"LOAD at bus {bus} (line {lineno}): constant-current part folded into constant power", RawWarning, stacklevel=2)
        loads.append(LoadRecord(bus, (pl + ip) / base_mva, (ql + iq) / base_mva))
        gs_extra[bus] += yp / base_mva
        bs_extra[bus] -= yq / base_mva

    for lineno, tok in records["FIXED SHUNT"]:
        f = _Fields(tok, lineno, "FIXED SHUNT")
        bus, status = f.int(0), f.int(2, 1)
        if status == 0 or not live(bus):
            continue
        gs_extra[bus] += f.float(3, 0.0) / base_mva
        bs_extra[bus] += f.float(4, 0.0) / base_mva

    gens: list[GenRecord] = []
    for lineno, tok in records["GENERATOR"]:
        f = _Fields(tok, lineno, "GENERATOR")
        bus = f.int(0)
        if f.int(14, 1) == 0 or not live(bus):
            continue
        gens.append(
            GenRecord(
                bus=bus,
                pmin=f.float(17, -9999.0) / base_mva,
                pmax=f.float(16, 9999.0) / base_mva,
                qmin=f.float(5, -9999.0) / base_mva,
                qmax=f.float(4, 9999.0) / base_mva,
                cost=(0.0, 1.0, 0.0),
                id=f"{bus}_{f.str(1, '1')}",
            )
        )

    branches: list[BranchRecord] = []
    for lineno, tok in records["BRANCH"]:
        f = _Fields(tok, lineno, "BRANCH")
        fb, tb = f.int(0), abs(f.int(1))
        if f.int(13, 1) == 0 or not live(fb, tb):
            continue
        branches.append(BranchRecord(fb, tb, f.float(3), f.float(4), f.float(5, 0.0), f.float(6, 0.0) / base_mva))
        gs_extra[fb] += f.float(9, 0.0)
        bs_extra[fb] += f.float(10, 0.0)
        gs_extra[tb] += f.float(11, 0.0)
        bs_extra[tb] += f.float(12, 0.0)

    xfmrs: list[XfmrRecord] = []
    for lineno, block in records["TRANSFORMER"]:
        xfmrs_rec = _transformer(block, lineno, base_mva, gs_extra, bs_extra, live)
        if xfmrs_rec is not None:
            xfmrs.append(xfmrs_rec)

    shunts: list[ShuntRecord] = []
    for lineno, tok in records["SWITCHED SHUNT"]:
        f = _Fields(tok, lineno, "SWITCHED SHUNT")
        bus = f.int(0)
        if f.int(3, 1) == 0 or not live(bus):
            continue
        binit = f.float(9, 0.0) / base_mva
        blocks = []
        for j in range(8):
            n = f.int(10 + 2 * j, 0)
            if n == 0:
                break
            blocks.append((n, f.float(11 + 2 * j) / base_mva))
        if f.int(1, 1) == 0 or not blocks:
            bs_extra[bus] += binit
            continue
        shunts.append(ShuntRecord(bus=bus, blocks=tuple(blocks), prior=binit, id=f"shunt_{bus}_{len(shunts)}"))

    for bid, vmax, vmin in bus_raw:
        buses.append(BusRecord(bid, vmin, vmax, gs_extra[bid] + 0.0, bs_extra[bid] + 0.0))

    case = CaseFile(
        base_mva=base_mva,
        buses=tuple(buses),
        generators=tuple(gens),
        loads=tuple(loads),
        branches=tuple(branches),
        transformers=tuple(xfmrs),
        shunts=tuple(shunts),
        reference_bus=ref_bus,
        name=name,
    )
    validate_case(case)
    return case


def _transformer(block, lineno, base_mva, gs_extra, bs_extra, live) -> XfmrRecord | None:
    l1 = _Fields(block[0], lineno, "TRANSFORMER")
    l2 = _Fields(block[1], lineno + 1, "TRANSFORMER")
    l3 = _Fields(block[2], lineno + 2, "TRANSFORMER")
    l4 = _Fields(block[3], lineno + 3, "TRANSFORMER")
    fb, tb = l1.int(0), l1.int(1)
    cw, cz, cm = l1.int(4, 1), l1.int(5, 1), l1.int(6, 1)
    if l1.int(11, 1) == 0 or not live(fb, tb):
        return None
    if cw != 1:
        raise CaseError(f"unsupported transformer winding code CW={cw}", line=lineno)
    r, x = l2.float(0), l2.float(1, 0.0)
    if cz == 2:
        sbase12 = l2.float(2, base_mva)
        r, x = r * base_mva / sbase12, x * base_mva / sbase12
    elif cz != 1:
        raise CaseError(f"unsupported transformer impedance code CZ={cz}", line=lineno + 1)
    if cm != 1:
        raise CaseError(f"unsupported magnetizing code CM={cm}", line=lineno)
    gs_extra[fb] += l1.float(7, 0.0)
    bs_extra[fb] += l1.float(8, 0.0)
    windv1, ang1 = l3.float(0, 1.0), l3.float(2, 0.0)
    windv2 = l4.float(0, 1.0)
    rate = l3.float(3, 0.0) / base_mva
    cod = abs(l3.int(6, 0))
    rma, rmi, ntp = l3.float(8, 1.1), l3.float(9, 0.9), l3.int(12, 33)
    tap = windv1 / windv2
    shift = math.radians(ang1)
    tap_set = shift_set = None
    prior_tap = prior_shift = None
    if cod in (1, 2):
        if ntp < 2 or rma <= rmi:
            raise CaseError("tap range needs NTP >= 2 and RMA > RMI", line=lineno + 2)
        tap_set = tuple(float(v) for v in np.linspace(rmi, rma, ntp) / windv2)
        prior_tap = tap
    elif cod == 3:
        if ntp < 2 or rma <= rmi:
            raise CaseError("phase range needs NTP >= 2 and RMA > RMI", line=lineno + 2)
        shift_set = tuple(float(v) for v in np.radians(np.linspace(rmi, rma, ntp)))
        prior_shift = shift
    return XfmrRecord(
        from_bus=fb,
        to_bus=tb,
        r=r,
        x=x,
        rate=rate,
        tap=tap,
        shift=shift,
        tap_set=tap_set,
        shift_set=shift_set,
        prior_tap=prior_tap,
        prior_shift=prior_shift,
        id=f"xf_{fb}_{tb}_{l1.str(3, '1')}",
    )
