from __future__ import annotations

import functools
import warnings

import pytest

from discopf.case_io import load_bundled
from discopf.network import build_network
from discopf.pipeline import PipelineOptions, solve_case

JSON_FIXTURES = ["t2", "t4_tap", "t4_extreme", "t4_screen", "t14", "t14_coarse", "t14_fine", "t30"]
RAW_FIXTURES = ["t14.raw", "r5_shunt.raw"]
ALL_FIXTURES = JSON_FIXTURES + RAW_FIXTURES
DEVICE_FIXTURES = [n for n in ALL_FIXTURES if n != "t2"]


@functools.lru_cache(maxsize=None)
def case(name: str, priors: bool = True):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        c = load_bundled(name)
    return c if priors else c.without_priors()


@functools.lru_cache(maxsize=None)
def network(name: str, priors: bool = True):
    return build_network(case(name, priors))


@functools.lru_cache(maxsize=None)
def pipeline(name: str, priors: bool = True, mode: str = "auto"):
    """Cached full solve; tests must not mutate the result."""
    return solve_case(network(name, priors), PipelineOptions(mode=mode))


# Acceptance report: one line per criterion, printed at the end of the run.
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def record_criterion():
    def record(name: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[name] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")

    return record
