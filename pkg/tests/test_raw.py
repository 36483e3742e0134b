import warnings

import pytest

from discopf.case_io import CaseError, bundled_case_path, parse_json_case, write_case_json
from discopf.raw import RawWarning, parse_raw_subset

from conftest import RAW_FIXTURES

R5 = bundled_case_path("r5_shunt.raw").read_text()


def parse(text, name="x"):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RawWarning)
        return parse_raw_subset(text, name)


def test_bus_limits_and_loads_in_per_unit():
    c = parse(R5)
    assert [b.id for b in c.buses] == [1, 2, 3, 4, 5]
    assert all((b.vmin, b.vmax) == (0.94, 1.06) for b in c.buses)
    assert c.reference_bus == 1
    assert {ld.bus: (ld.p, ld.q) for ld in c.loads}[3] == pytest.approx((0.6, 0.2))
    assert c.buses[2].bs == pytest.approx(0.05)


def test_switched_shunt_blocks():
    (sh,) = parse(R5).shunts
    assert sh.bus == 5
    assert sh.blocks == ((2, 0.05), (1, 0.1))
    assert sh.prior == pytest.approx(0.1)


def test_tap_and_phase_ranges():
    tap, phase = parse(R5).transformers
    assert len(tap.tap_set) == 9
    assert tap.tap_set[0] == pytest.approx(0.9) and tap.tap_set[-1] == pytest.approx(1.1)
    assert phase.shift_set[-1] == pytest.approx(0.17453292519943295)
    assert phase.tap_set is None


def test_skipped_group_warns():
    with pytest.warns(RawWarning, match="AREA"):
        parse_raw_subset(R5, "r5")


def test_three_winding_rejected():
    lines = R5.splitlines()
    i = next(k for k, ln in enumerate(lines) if ln.startswith("4, 5, 0,"))
    lines[i] = lines[i].replace("4, 5, 0,", "4, 5, 3,", 1)
    with pytest.raises(CaseError, match="3-winding") as exc:
        parse("\n".join(lines))
    assert exc.value.line == i + 1


def test_malformed_record_has_line_number():
    lines = R5.splitlines()
    lines[4] = "2, 'EAST', 230.0, 2, 1, 1, 1, 1.00, -2.0, oops, 0.94, 1.06, 0.94"
    with pytest.raises(CaseError) as exc:
        parse("\n".join(lines))
    assert exc.value.line == 5
    assert "line 5" in str(exc.value)


def test_empty_document():
    with pytest.raises(CaseError, match="empty"):
        parse_raw_subset("", "e")


def test_missing_swing_bus():
    with pytest.raises(CaseError, match="swing"):
        parse(R5.replace("'NORTH', 230.0, 3,", "'NORTH', 230.0, 2,"))


@pytest.mark.parametrize("name", RAW_FIXTURES)
def test_convert_then_parse_is_identity(name):
    c = parse(bundled_case_path(name).read_text(), name.split(".")[0])
    text = write_case_json(c)
    again = parse_json_case(text)
    assert again == c
    assert write_case_json(again) == text


def test_t14_raw_matches_json_fixture():
    from conftest import case

    raw, js = case("t14.raw"), case("t14")
    assert len(raw.buses) == len(js.buses)
    assert len(raw.transformers) == len(js.transformers)
    assert sum(ld.p for ld in raw.loads) == pytest.approx(sum(ld.p for ld in js.loads), abs=1e-9)
