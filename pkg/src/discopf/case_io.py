"""Grid case records, the native JSON case format and solution writers.

All quantities held by a :class:`CaseFile` are per-unit on ``base_mva``;
angles are radians.  The native JSON document stores exactly these values,
so ``parse_json_case(write_case_json(case)) == case`` holds bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import jsonschema

SCHEMA_VERSION = 1

# Digits kept when deduplicating achievable shunt susceptances.
_SET_DIGITS = 12


class CaseError(ValueError):
    """Invalid case document.

    ``path`` locates the offending entry, e.g. ``"$.transformers[0].tap_set"``.
    ``line`` is set by the RAW reader.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = []
        if path:
            where.append(path)
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class BusRecord:
    id: int
    vmin: float
    vmax: float
    gs: float = 0.0
    bs: float = 0.0


@dataclass(frozen=True)
class GenRecord:
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    # (c2, c1, c0) of c2*P^2 + c1*P + c0, P in p.u.
    cost: tuple[float, float, float] = (0.0, 1.0, 0.0)
    id: str = ""


@dataclass(frozen=True)
class LoadRecord:
    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    rate: float = 0.0  # MVA p.u.; 0 means unlimited


@dataclass(frozen=True)
class XfmrRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    rate: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    tap_set: tuple[float, ...] | None = None
    shift_set: tuple[float, ...] | None = None
    prior_tap: float | None = None
    prior_shift: float | None = None
    id: str = ""


@dataclass(frozen=True)
class ShuntRecord:
    bus: int
    # (step count, susceptance per step in p.u.)
    blocks: tuple[tuple[int, float], ...]
    prior: float | None = None
    sequential: bool = False
    id: str = ""

    def allowed(self) -> tuple[float, ...]:
        """Sorted achievable total susceptances."""
        return shunt_settings(self.blocks, sequential=self.sequential)


@dataclass(frozen=True)
class CaseFile:
    base_mva: float
    buses: tuple[BusRecord, ...]
    generators: tuple[GenRecord, ...]
    loads: tuple[LoadRecord, ...]
    branches: tuple[BranchRecord, ...]
    transformers: tuple[XfmrRecord, ...]
    shunts: tuple[ShuntRecord, ...]
    reference_bus: int
    name: str = ""

    @property
    def n_devices(self) -> int:
        n = len(self.shunts)
        for t in self.transformers:
            n += (t.tap_set is not None) + (t.shift_set is not None)
        return n

    def without_priors(self) -> "CaseFile":
        """Copy with every prior setting removed."""
        return replace(
            self,
            transformers=tuple(replace(t, prior_tap=None, prior_shift=None) for t in self.transformers),
            shunts=tuple(replace(s, prior=None) for s in self.shunts),
        )


def shunt_settings(blocks: Sequence[tuple[int, float]], sequential: bool = False) -> tuple[float, ...]:
    """Achievable total susceptance of a switched shunt.

    With ``sequential=False`` every switch state of every block is allowed
    (cumulative sums over all combinations).  With ``sequential=True`` the
    steps engage in listed order, so only prefix sums are reachable.
    """
    if sequential:
        values = [0.0]
        total = 0.0
        for n, b in blocks:
            for _ in range(int(n)):
                total += b
                values.append(total)
        return tuple(sorted({round(v, _SET_DIGITS) + 0.0 for v in values}))
    sums = {0.0}
    for n, b in blocks:
        sums = {round(s + k * b, _SET_DIGITS) + 0.0 for s in sums for k in range(int(n) + 1)}
    return tuple(sorted(sums))


def enumerate_shunt_states(blocks: Sequence[tuple[int, float]]) -> tuple[float, ...]:
    """Brute-force counterpart of :func:`shunt_settings` over all switch states."""
    sums = set()
    for state in itertools.product(*(range(int(n) + 1) for n, _ in blocks)):
        sums.add(round(sum(k * b for k, (_, b) in zip(state, blocks)), _SET_DIGITS) + 0.0)
    return tuple(sorted(sums))


# ---------------------------------------------------------------------------
# JSON schema
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_BUS_REF = {"type": "integer"}
_SETTING_LIST = {"oneOf": [{"type": "null"}, {"type": "array", "items": _NUM}]}
_OPT_NUM = {"oneOf": [{"type": "null"}, _NUM]}

CASE_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "base_mva", "reference_bus", "buses", "generators", "loads", "branches"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "base_mva": {"type": "number", "exclusiveMinimum": 0},
        "reference_bus": _BUS_REF,
        "buses": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "vmin", "vmax"],
                "additionalProperties": False,
                "properties": {"id": _BUS_REF, "vmin": _NUM, "vmax": _NUM, "gs": _NUM, "bs": _NUM},
            },
        },
        "generators": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["bus", "pmin", "pmax", "qmin", "qmax"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"},
                    "bus": _BUS_REF,
                    "pmin": _NUM,
                    "pmax": _NUM,
                    "qmin": _NUM,
                    "qmax": _NUM,
                    "cost": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
                },
            },
        },
        "loads": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["bus", "p", "q"],
                "additionalProperties": False,
                "properties": {"bus": _BUS_REF, "p": _NUM, "q": _NUM},
            },
        },
        "branches": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["from", "to", "r", "x"],
                "additionalProperties": False,
                "properties": {"from": _BUS_REF, "to": _BUS_REF, "r": _NUM, "x": _NUM, "b": _NUM, "rate": _NUM},
            },
        },
        "transformers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["from", "to", "r", "x"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"},
                    "from": _BUS_REF,
                    "to": _BUS_REF,
                    "r": _NUM,
                    "x": _NUM,
                    "b": _NUM,
                    "rate": _NUM,
                    "tap": _NUM,
                    "shift": _NUM,
                    "tap_set": _SETTING_LIST,
                    "shift_set": _SETTING_LIST,
                    "prior_tap": _OPT_NUM,
                    "prior_shift": _OPT_NUM,
                },
            },
        },
        "shunts": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["bus", "blocks"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"},
                    "bus": _BUS_REF,
                    "blocks": {
                        "type": "array",
                        "items": {
                            "type": "array",
                            "prefixItems": [{"type": "integer", "minimum": 1}, _NUM],
                            "minItems": 2,
                            "maxItems": 2,
                        },
                    },
                    "prior": _OPT_NUM,
                    "sequential": {"type": "boolean"},
                },
            },
        },
    },
}


def _json_path(parts: Iterable[Any]) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def parse_json_case(text: str) -> CaseFile:
    """Parse and validate a native JSON case document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"not valid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(doc, dict):
        raise CaseError("case document must be a JSON object", path="$")
    validator = jsonschema.Draft202012Validator(CASE_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        if err.validator == "required":
            missing = [k for k in err.validator_value if k not in err.instance]
            raise CaseError(f"missing required field '{missing[0]}'", path=_json_path(err.absolute_path))
        raise CaseError(f"schema violation: {err.message}", path=_json_path(err.absolute_path))

    case = CaseFile(
        base_mva=float(doc["base_mva"]),
        buses=tuple(
            BusRecord(int(b["id"]), float(b["vmin"]), float(b["vmax"]), float(b.get("gs", 0.0)), float(b.get("bs", 0.0)))
            for b in doc["buses"]
        ),
        generators=tuple(
            GenRecord(
                bus=int(g["bus"]),
                pmin=float(g["pmin"]),
                pmax=float(g["pmax"]),
                qmin=float(g["qmin"]),
                qmax=float(g["qmax"]),
                cost=tuple(float(c) for c in g.get("cost", (0.0, 1.0, 0.0))),
                id=g.get("id", ""),
            )
            for g in doc["generators"]
        ),
        loads=tuple(LoadRecord(int(d["bus"]), float(d["p"]), float(d["q"])) for d in doc["loads"]),
        branches=tuple(
            BranchRecord(int(br["from"]), int(br["to"]), float(br["r"]), float(br["x"]), float(br.get("b", 0.0)), float(br.get("rate", 0.0)))
            for br in doc["branches"]
        ),
        transformers=tuple(_xfmr_from_doc(t) for t in doc.get("transformers", [])),
        shunts=tuple(
            ShuntRecord(
                bus=int(s["bus"]),
                blocks=tuple((int(n), float(b)) for n, b in s["blocks"]),
                prior=None if s.get("prior") is None else float(s["prior"]),
                sequential=bool(s.get("sequential", False)),
                id=s.get("id", ""),
            )
            for s in doc.get("shunts", [])
        ),
        reference_bus=int(doc["reference_bus"]),
        name=doc.get("name", ""),
    )
    validate_case(case)
    return case


def _opt_tuple(v):
    return None if v is None else tuple(float(x) for x in v)


def _xfmr_from_doc(t: dict) -> XfmrRecord:
    return XfmrRecord(
        from_bus=int(t["from"]),
        to_bus=int(t["to"]),
        r=float(t["r"]),
        x=float(t["x"]),
        b=float(t.get("b", 0.0)),
        rate=float(t.get("rate", 0.0)),
        tap=float(t.get("tap", 1.0)),
        shift=float(t.get("shift", 0.0)),
        tap_set=_opt_tuple(t.get("tap_set")),
        shift_set=_opt_tuple(t.get("shift_set")),
        prior_tap=None if t.get("prior_tap") is None else float(t["prior_tap"]),
        prior_shift=None if t.get("prior_shift") is None else float(t["prior_shift"]),
        id=t.get("id", ""),
    )


def _check_setting_list(values: Sequence[float] | None, path: str) -> None:
    if values is None:
        return
    if len(values) == 0:
        raise CaseError("setting list is empty", path=path)
    if not all(math.isfinite(v) for v in values):
        raise CaseError("setting list has non-finite values", path=path)
    if any(b <= a for a, b in zip(values, values[1:])):
        raise CaseError("setting list is not strictly increasing", path=path)


def validate_case(case: CaseFile) -> None:
    """Semantic checks; raises :class:`CaseError` naming record and field."""
    ids = [b.id for b in case.buses]
    seen: set[int] = set()
    for i, bid in enumerate(ids):
        if bid in seen:
            raise CaseError(f"duplicate bus id {bid}", path=f"$.buses[{i}].id")
        seen.add(bid)
    for i, b in enumerate(case.buses):
        if not b.vmin < b.vmax:
            raise CaseError(f"bus {b.id}: vmin must be below vmax", path=f"$.buses[{i}].vmin")
        if b.vmin <= 0:
            raise CaseError(f"bus {b.id}: vmin must be positive", path=f"$.buses[{i}].vmin")
    if case.reference_bus not in seen:
        raise CaseError(f"reference bus {case.reference_bus} does not exist", path="$.reference_bus")

    def ref(bus: int, path: str) -> None:
        if bus not in seen:
            raise CaseError(f"reference to unknown bus {bus}", path=path)

    for i, g in enumerate(case.generators):
        ref(g.bus, f"$.generators[{i}].bus")
        if g.pmin > g.pmax:
            raise CaseError("pmin exceeds pmax", path=f"$.generators[{i}].pmin")
        if g.qmin > g.qmax:
            raise CaseError("qmin exceeds qmax", path=f"$.generators[{i}].qmin")
    for i, d in enumerate(case.loads):
        ref(d.bus, f"$.loads[{i}].bus")
    for group, items in (("branches", case.branches), ("transformers", case.transformers)):
        for i, br in enumerate(items):
            ref(br.from_bus, f"$.{group}[{i}].from")
            ref(br.to_bus, f"$.{group}[{i}].to")
            if br.from_bus == br.to_bus:
                raise CaseError("branch connects a bus to itself", path=f"$.{group}[{i}].to")
            if br.r == 0.0 and br.x == 0.0:
                raise CaseError("zero series impedance", path=f"$.{group}[{i}].x")
            if br.rate < 0:
                raise CaseError("negative rating", path=f"$.{group}[{i}].rate")
    for i, t in enumerate(case.transformers):
        _check_setting_list(t.tap_set, f"$.transformers[{i}].tap_set")
        _check_setting_list(t.shift_set, f"$.transformers[{i}].shift_set")
        if t.tap_set is not None and t.tap_set[0] <= 0:
            raise CaseError("tap ratios must be positive", path=f"$.transformers[{i}].tap_set")
        if t.tap_set is None and t.tap <= 0:
            raise CaseError("tap ratio must be positive", path=f"$.transformers[{i}].tap")
    for i, s in enumerate(case.shunts):
        ref(s.bus, f"$.shunts[{i}].bus")
        if any(n < 1 for n, _ in s.blocks):
            raise CaseError("block step count must be >= 1", path=f"$.shunts[{i}].blocks")
        if not all(math.isfinite(b) for _, b in s.blocks):
            raise CaseError("non-finite block susceptance", path=f"$.shunts[{i}].blocks")


def _case_to_doc(case: CaseFile) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "name": case.name,
        "base_mva": case.base_mva,
        "reference_bus": case.reference_bus,
        "buses": [asdict(b) for b in case.buses],
        "generators": [
            {"id": g.id, "bus": g.bus, "pmin": g.pmin, "pmax": g.pmax, "qmin": g.qmin, "qmax": g.qmax, "cost": list(g.cost)}
            for g in case.generators
        ],
        "loads": [asdict(d) for d in case.loads],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b": br.b, "rate": br.rate} for br in case.branches
        ],
        "transformers": [],
        "shunts": [],
    }
    for t in case.transformers:
        doc["transformers"].append(
            {
                "id": t.id,
                "from": t.from_bus,
                "to": t.to_bus,
                "r": t.r,
                "x": t.x,
                "b": t.b,
                "rate": t.rate,
                "tap": t.tap,
                "shift": t.shift,
                "tap_set": None if t.tap_set is None else list(t.tap_set),
                "shift_set": None if t.shift_set is None else list(t.shift_set),
                "prior_tap": t.prior_tap,
                "prior_shift": t.prior_shift,
            }
        )
    for s in case.shunts:
        doc["shunts"].append(
            {"id": s.id, "bus": s.bus, "blocks": [[n, b] for n, b in s.blocks], "prior": s.prior, "sequential": s.sequential}
        )
    return doc


def write_case_json(case: CaseFile, indent: int | None = 1) -> str:
    return json.dumps(_case_to_doc(case), indent=indent)


def case_hash(case: CaseFile) -> str:
    """Stable content hash of a case (hex sha256 of its canonical JSON)."""
    canon = json.dumps(_case_to_doc(case), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def read_case(path: str | Path, fmt: str | None = None) -> CaseFile:
    """Read a case file, choosing the reader by ``fmt`` or the file extension."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"case file not found: {path}")
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    text = path.read_text(encoding="utf-8")
    if fmt == "json":
        return parse_json_case(text)
    if fmt == "raw":
        from .raw import parse_raw_subset

        return parse_raw_subset(text, name=path.stem)
    raise CaseError(f"unknown case format '{fmt}'")


def bundled_case_path(name: str) -> Path:
    """Path of a fixture shipped in ``discopf/data``; a bare name means ``.json``."""
    path = Path(__file__).with_name("data") / name
    return path if path.suffix else path.with_suffix(".json")


def load_bundled(name: str) -> CaseFile:
    return read_case(bundled_case_path(name))


# ---------------------------------------------------------------------------
# Solution documents
# ---------------------------------------------------------------------------

SOLUTION_SCHEMA_VERSION = 1


@dataclass
class DeviceResult:
    id: str
    kind: str
    setting: float
    prior: float
    changed: bool


@dataclass
class Solution:
    """Final (or failed) solve of one case, ready for serialization."""

    case_name: str
    case_hash: str
    status: str  # "converged" | "failed"
    objective: float
    bus_ids: list[int]
    vm: list[float]
    va: list[float]
    gen_bus: list[int]
    p: list[float]
    q: list[float]
    devices: list[DeviceResult] = field(default_factory=list)
    stage2_needed: bool | None = None
    kkt_residual: float = math.nan
    max_violation: float = math.nan
    message: str = ""
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def pct_adj(self) -> float:
        """Percentage of devices whose setting differs from the prior."""
        if not self.devices:
            return 0.0
        return 100.0 * sum(d.changed for d in self.devices) / len(self.devices)


def _solution_doc(sol: Solution) -> dict[str, Any]:
    return {
        "schema_version": SOLUTION_SCHEMA_VERSION,
        "case_name": sol.case_name,
        "case_hash": sol.case_hash,
        "status": sol.status,
        "message": sol.message,
        "objective": sol.objective,
        "pct_adj": sol.pct_adj,
        "stage2_needed": sol.stage2_needed,
        "kkt_residual": sol.kkt_residual,
        "max_violation": sol.max_violation,
        "buses": [{"id": i, "vm": m, "va": a} for i, m, a in zip(sol.bus_ids, sol.vm, sol.va)],
        "generators": [{"index": k, "bus": b, "p": p, "q": q} for k, (b, p, q) in enumerate(zip(sol.gen_bus, sol.p, sol.q))],
        "devices": [asdict(d) for d in sol.devices],
        "diagnostics": sol.diagnostics,
    }


def write_solution(sol: Solution, format: str = "json") -> str | dict[str, str]:
    """Serialize a solution.

    ``"json"`` returns one document.  ``"csv"`` returns a mapping of table
    name (``buses``, ``generators``, ``devices``, ``summary``) to CSV text.
    """
    if format == "json":
        return json.dumps(_solution_doc(sol), indent=1, allow_nan=True)
    if format != "csv":
        raise ValueError(f"unknown solution format '{format}'")
    tables = {
        "buses": (["id", "vm", "va"], zip(sol.bus_ids, sol.vm, sol.va)),
        "generators": (["index", "bus", "p", "q"], ((k, b, p, q) for k, (b, p, q) in enumerate(zip(sol.gen_bus, sol.p, sol.q)))),
        "devices": (["id", "kind", "prior", "setting", "changed"], ((d.id, d.kind, repr(d.prior), repr(d.setting), str(d.changed).lower()) for d in sol.devices)),
        "summary": (
            ["case_name", "status", "objective", "pct_adj", "n_devices", "n_changed", "stage2_needed"],
            [(sol.case_name, sol.status, repr(sol.objective), f"{sol.pct_adj:.4f}", len(sol.devices), sum(d.changed for d in sol.devices), sol.stage2_needed)],
        ),
    }
    out = {}
    for name, (header, rows) in tables.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        out[name] = buf.getvalue()
    return out


def read_solution(text: str) -> Solution:
    doc = json.loads(text)
    if doc.get("schema_version") != SOLUTION_SCHEMA_VERSION:
        raise CaseError("unsupported solution schema version", path="$.schema_version")
    return Solution(
        case_name=doc["case_name"],
        case_hash=doc["case_hash"],
        status=doc["status"],
        objective=doc["objective"],
        bus_ids=[b["id"] for b in doc["buses"]],
        vm=[b["vm"] for b in doc["buses"]],
        va=[b["va"] for b in doc["buses"]],
        gen_bus=[g["bus"] for g in doc["generators"]],
        p=[g["p"] for g in doc["generators"]],
        q=[g["q"] for g in doc["generators"]],
        devices=[DeviceResult(**d) for d in doc["devices"]],
        stage2_needed=doc.get("stage2_needed"),
        kkt_residual=doc.get("kkt_residual", math.nan),
        max_violation=doc.get("max_violation", math.nan),
        message=doc.get("message", ""),
        diagnostics=doc.get("diagnostics", {}),
    )
