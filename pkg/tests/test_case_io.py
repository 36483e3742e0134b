import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discopf.case_io import (
    CaseError,
    DeviceResult,
    Solution,
    bundled_case_path,
    case_hash,
    enumerate_shunt_states,
    parse_json_case,
    read_case,
    read_solution,
    shunt_settings,
    write_case_json,
    write_solution,
)

from conftest import JSON_FIXTURES, case

MINIMAL = {
    "schema_version": 1,
    "base_mva": 100.0,
    "reference_bus": 1,
    "buses": [{"id": 1, "vmin": 0.95, "vmax": 1.05}, {"id": 2, "vmin": 0.9, "vmax": 1.1}],
    "generators": [{"bus": 1, "pmin": 0.0, "pmax": 2.0, "qmin": -1.0, "qmax": 1.0}],
    "loads": [{"bus": 2, "p": 0.8, "q": 0.3}],
    "branches": [{"from": 1, "to": 2, "r": 0.02, "x": 0.08}],
}


def doc(**changes):
    d = json.loads(json.dumps(MINIMAL))
    d.update(changes)
    return d


def test_minimal_case():
    c = parse_json_case(json.dumps(MINIMAL))
    assert len(c.buses) == 2
    assert c.n_devices == 0
    assert c.transformers == () and c.shunts == ()


def test_t4_tap_fixture_has_five_taps():
    c = case("t4_tap")
    assert len(c.transformers) == 1
    assert c.transformers[0].tap_set == (0.9, 0.95, 1.0, 1.05, 1.1)
    assert parse_json_case(write_case_json(c)) == c


def test_missing_reference_bus_is_named():
    d = doc()
    del d["reference_bus"]
    with pytest.raises(CaseError, match="reference_bus"):
        parse_json_case(json.dumps(d))


def test_schema_version_required():
    d = doc()
    del d["schema_version"]
    with pytest.raises(CaseError, match="schema_version"):
        parse_json_case(json.dumps(d))


def test_schema_violation_reports_json_path():
    d = doc()
    d["buses"][1]["vmin"] = "low"
    with pytest.raises(CaseError) as exc:
        parse_json_case(json.dumps(d))
    assert "$.buses[1].vmin" in str(exc.value)


def test_dangling_bus_reference():
    d = doc()
    d["loads"][0]["bus"] = 7
    with pytest.raises(CaseError) as exc:
        parse_json_case(json.dumps(d))
    assert "$.loads[0].bus" in str(exc.value)


@pytest.mark.parametrize(
    "tap_set, message",
    [([], "empty"), ([1.0, 0.9], "strictly increasing"), ([0.9, 0.9], "strictly increasing")],
)
def test_bad_setting_lists(tap_set, message):
    d = doc(transformers=[{"from": 1, "to": 2, "r": 0.0, "x": 0.1, "tap_set": tap_set}])
    with pytest.raises(CaseError, match=message):
        parse_json_case(json.dumps(d))


def test_duplicate_bus_ids():
    d = doc()
    d["buses"][1]["id"] = 1
    with pytest.raises(CaseError, match="duplicate bus id"):
        parse_json_case(json.dumps(d))


def test_vmin_below_vmax():
    d = doc()
    d["buses"][0]["vmin"] = 1.1
    with pytest.raises(CaseError, match="vmin"):
        parse_json_case(json.dumps(d))


def test_generator_limits_ordered():
    d = doc()
    d["generators"][0]["pmin"] = 3.0
    with pytest.raises(CaseError, match="pmin"):
        parse_json_case(json.dumps(d))


def test_invalid_json_has_line():
    with pytest.raises(CaseError) as exc:
        parse_json_case('{\n "a": ,\n}')
    assert exc.value.line == 2


@pytest.mark.parametrize("name", JSON_FIXTURES)
def test_json_round_trip(name):
    c = case(name)
    again = parse_json_case(write_case_json(c))
    assert again == c
    assert parse_json_case(write_case_json(again)) == again
    assert case_hash(again) == case_hash(c)


def test_read_case_dispatch_and_missing_file(tmp_path):
    assert read_case(bundled_case_path("t2")).name == "t2"
    with pytest.raises(FileNotFoundError):
        read_case(tmp_path / "missing.json")
    p = tmp_path / "c.txt"
    p.write_text(json.dumps(MINIMAL))
    with pytest.raises(CaseError, match="unknown case format"):
        read_case(p)
    assert read_case(p, "json").base_mva == 100.0


def test_spec_shunt_example():
    assert shunt_settings(((2, 0.05), (1, 0.10))) == (0.0, 0.05, 0.1, 0.15, 0.2)


def test_sequential_shunt_flag():
    assert shunt_settings(((1, 0.1), (1, 0.05)), sequential=True) == (0.0, 0.1, 0.15)
    assert shunt_settings(((1, 0.1), (1, 0.05))) == (0.0, 0.05, 0.1, 0.15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.sampled_from([0.01, 0.025, 0.05, 0.1, -0.05])), min_size=1, max_size=3))
def test_shunt_sets_match_enumeration(blocks):
    assert shunt_settings(blocks) == enumerate_shunt_states(blocks)


def _solution(devices=()):
    return Solution(
        case_name="t2", case_hash="abc", status="converged", objective=880.3387991234567,
        bus_ids=[1, 2], vm=[1.05, 0.98123456789], va=[0.0, -0.0412345678901],
        gen_bus=[1], p=[0.8123456789], q=[0.3], devices=list(devices),
        stage2_needed=False, kkt_residual=1e-12, max_violation=0.0, diagnostics={"stage1_nu": [1.0, 0.0]},
    )


def test_two_bus_solution_json():
    d = json.loads(write_solution(_solution()))
    assert len(d["buses"]) == 2 and len(d["generators"]) == 1 and d["devices"] == []
    assert d["diagnostics"]["stage1_nu"] == [1.0, 0.0]


def test_changed_device_csv_and_pct_adj():
    sol = _solution([DeviceResult("T14:tap", "tap_ratio", 1.05, 1.0, True)])
    tables = write_solution(sol, "csv")
    rows = tables["devices"].splitlines()
    assert rows[0] == "id,kind,prior,setting,changed"
    assert rows[1].endswith(",true")
    assert sol.pct_adj == 100.0
    assert "100.0000" in tables["summary"]


def test_solution_round_trip():
    sol = _solution([DeviceResult("SH9", "shunt_susceptance_pu", 0.19, 0.19, False)])
    back = read_solution(write_solution(sol))
    for f in ("objective", "vm", "va", "p", "q", "kkt_residual", "max_violation"):
        a, b = getattr(sol, f), getattr(back, f)
        if isinstance(a, list):
            assert all(abs(x - y) <= 1e-12 for x, y in zip(a, b))
        else:
            assert abs(a - b) <= 1e-12
    assert back.devices == sol.devices


def test_failed_solution_serializes():
    sol = _solution()
    sol.status, sol.objective, sol.message = "failed", math.nan, "stage I failed"
    d = json.loads(write_solution(sol))
    assert d["status"] == "failed" and d["message"] == "stage I failed"


def test_per_unit_reproduces_mw():
    c = case("t14")
    # bus 3 load 94.2 MW in the source data
    (load,) = [ld for ld in c.loads if ld.bus == 3]
    assert abs(load.p * c.base_mva - 94.2) <= 1e-9
