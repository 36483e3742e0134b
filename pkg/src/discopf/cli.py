"""``discopf`` command line: solve, sweep, compare, convert, oracle."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .case_io import CaseError, CaseFile, Solution, read_case, read_solution, write_case_json, write_solution
from .config import ConfigError, load_config, pipeline_options
from .network import build_network
from .pipeline import MODES, PipelineOptions, PipelineResult, solve_case

log = logging.getLogger("discopf")

EXIT_OK, EXIT_FAILED, EXIT_ERROR = 0, 1, 2


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("case", help="case file (.json or .raw)")
    p.add_argument("--format", choices=("json", "raw"), help="case format (default: from the extension)")
    p.add_argument("--stage2", choices=MODES, help="auto: round-and-resolve, Stage II on failure")
    p.add_argument("--no-priors", action="store_true", help="drop prior settings (medians, shunts off)")
    p.add_argument("--warm-start", action="store_true", help="base values at the priors with a high k_adj")
    p.add_argument("--out-dir", default=".", help="directory for output files")
    p.add_argument("--trace", action="store_true", help="log every Newton iteration to stderr")
    p.add_argument("--seed", type=int, default=0, help="reserved; recorded but has no numeric effect")
    p.add_argument("--config", help="TOML file overriding the bundled defaults")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="discopf", description="AC-OPF with discrete controls by two-stage homotopy")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one case")
    _add_solver_flags(p)
    p.add_argument("--kadj", type=float, help="adjustment penalty k_adj")

    p = sub.add_parser("sweep", help="solve one case for several k_adj values")
    _add_solver_flags(p)
    p.add_argument("--kadj", required=True, help="comma-separated k_adj values")
    p.add_argument("--jobs", type=int, default=1, help="parallel solves")

    p = sub.add_parser("compare", help="dispatch and setting differences of two solutions")
    p.add_argument("solution_a")
    p.add_argument("solution_b")
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("convert", help="convert a RAW v33 case to JSON")
    p.add_argument("raw")
    p.add_argument("-o", "--output", help="output path (default: stdout)")

    p = sub.add_parser("oracle", help="brute-force enumeration of discrete settings")
    p.add_argument("case")
    p.add_argument("--format", choices=("json", "raw"))
    p.add_argument("--no-priors", action="store_true")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--cache", help="directory for cached oracle tables")
    p.add_argument("--config", help="TOML file overriding the bundled defaults")
    return ap


def _load_case(args) -> CaseFile:
    case = read_case(args.case, args.format)
    return case.without_priors() if getattr(args, "no_priors", False) else case


def _options(args, kadj: float | None = None) -> PipelineOptions:
    over: dict = {}
    if kadj is not None:
        over.setdefault("homotopy", {})["k_adj"] = kadj
    if args.warm_start:
        over.setdefault("homotopy", {})["warm_start"] = True
    if args.stage2:
        over.setdefault("stage2", {})["mode"] = args.stage2
    return pipeline_options(load_config(args.config, over))


def _summary(sol: Solution) -> str:
    need = "n/a" if sol.stage2_needed is None else ("yes" if sol.stage2_needed else "no")
    obj = "nan" if not math.isfinite(sol.objective) else f"{sol.objective:.6f}"
    line = f"{sol.case_name}: status={sol.status} objective={obj} %Adj={sol.pct_adj:.1f} stage2_needed={need}"
    return line + (f" ({sol.message})" if sol.message else "")


def _write_outputs(out: Path, res: PipelineResult, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    sol = res.solution
    sol.diagnostics["seed"] = seed
    (out / "solution.json").write_text(write_solution(sol, "json"))
    for name, text in write_solution(sol, "csv").items():
        (out / f"solution_{name}.csv").write_text(text)
    if res.report is not None:
        (out / "rounding.json").write_text(res.report.to_json())
    if res.stage1 is not None:
        (out / "trace_stage1.csv").write_text(res.stage1.to_csv(("nu1", "max_slack")))
    s2 = res.stage2 or res.resolve
    if s2 is not None:
        (out / "trace_stage2.csv").write_text(s2.trace.to_csv(("nu2", "residual_injection")))


def cmd_solve(args) -> int:
    case = _load_case(args)
    opts = _options(args, args.kadj)
    res = solve_case(build_network(case), opts)
    _write_outputs(Path(args.out_dir), res, args.seed)
    print(_summary(res.solution))
    return EXIT_OK if res.solution.converged else EXIT_FAILED


def _sweep_one(case: CaseFile, opts: PipelineOptions) -> Solution:
    return solve_case(build_network(case), opts).solution


def parse_kadj_list(text: str) -> list[float]:
    vals: list[float] = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        v = float(tok)
        if v < 0 or not math.isfinite(v):
            raise ValueError(f"k_adj must be finite and >= 0, got {tok}")
        if v in vals:
            warnings.warn(f"duplicate k_adj value {v} ignored", stacklevel=2)
            continue
        vals.append(v)
    if not vals:
        raise ValueError("empty k_adj list")
    return vals


def sweep_table(kadj: list[float], sols: list[Solution]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k_adj", "status", "objective", "pct_adj", "stage2_needed", "settings"])
    for k, s in zip(kadj, sols):
        need = "" if s.stage2_needed is None else str(s.stage2_needed).lower()
        w.writerow([repr(k), s.status, repr(s.objective), f"{s.pct_adj:.4f}", need, " ".join(repr(d.setting) for d in s.devices)])
    return buf.getvalue()


def cmd_sweep(args) -> int:
    case = _load_case(args)
    kadj = parse_kadj_list(args.kadj)
    opts = [_options(args, k) for k in kadj]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            sols = list(ex.map(_sweep_one, [case] * len(opts), opts))
    else:
        sols = [_sweep_one(case, o) for o in opts]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_table(kadj, sols))
    for k, s in zip(kadj, sols):
        print(f"k_adj={k:g} " + _summary(s))
    return EXIT_OK if all(s.converged for s in sols) else EXIT_FAILED


def compare_table(a: Solution, b: Solution) -> tuple[str, int, int]:
    """CSV of per-generator dispatch and per-device settings; counts of differences."""
    if a.case_hash != b.case_hash:
        raise CaseError(f"solutions belong to different cases ({a.case_name} vs {b.case_name})")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "name", "bus", "a", "b", "diff"])
    n_gen = n_dev = 0
    for k, (bus, pa, pb) in enumerate(zip(a.gen_bus, a.p, b.p)):
        d = pb - pa
        n_gen += d != 0.0
        w.writerow(["generator_p", k, bus, repr(pa), repr(pb), repr(d)])
    for da, db in zip(a.devices, b.devices):
        d = db.setting - da.setting
        n_dev += d != 0.0
        w.writerow(["device_setting", da.id, "", repr(da.setting), repr(db.setting), repr(d)])
    w.writerow(["objective", "", "", repr(a.objective), repr(b.objective), repr(b.objective - a.objective)])
    return buf.getvalue(), n_gen, n_dev


def cmd_compare(args) -> int:
    a = read_solution(Path(args.solution_a).read_text())
    b = read_solution(Path(args.solution_b).read_text())
    text, n_gen, n_dev = compare_table(a, b)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.csv").write_text(text)
    print(f"{n_gen} generator dispatch differences, {n_dev} device setting differences, objective diff {b.objective - a.objective:.6g}")
    return EXIT_OK


def cmd_convert(args) -> int:
    from .raw import RawWarning, parse_raw_subset

    path = Path(args.raw)
    if not path.exists():
        raise FileNotFoundError(f"case file not found: {path}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RawWarning)
        case = parse_raw_subset(path.read_text(encoding="utf-8"), name=path.stem)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    text = write_case_json(case)
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .oracle import GuardExceeded, enumerate_optimum

    case = _load_case(args)
    guard = load_config(args.config)["oracle"]["guard"]
    try:
        res = enumerate_optimum(case, guard=guard, cache_dir=args.cache)
    except GuardExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle.csv").write_text(res.to_csv())
    n_feas = sum(r.feasible for r in res.table)
    if res.best is None:
        print(f"{len(res.table)} combinations, none feasible")
        return EXIT_FAILED
    print(f"{len(res.table)} combinations, {n_feas} feasible, best objective {res.best_objective:.6f} at {json.dumps(res.best_settings)}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "compare": cmd_compare, "convert": cmd_convert, "oracle": cmd_oracle}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if getattr(args, "trace", False) else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if not getattr(args, "trace", False):
        logging.getLogger("jax").setLevel(logging.ERROR)
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, CaseError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
