"""Two-stage homotopy solver for AC optimal power flow with discrete controls."""

from .case_io import CaseError, CaseFile, Solution, load_bundled, parse_json_case, read_case, write_solution
from .network import Network, build_network

__all__ = [
    "CaseError",
    "CaseFile",
    "Network",
    "Solution",
    "build_network",
    "load_bundled",
    "parse_json_case",
    "read_case",
    "write_solution",
]
