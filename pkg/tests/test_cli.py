import csv
import io
import json
import warnings

import pytest

from discopf.case_io import bundled_case_path, parse_json_case, read_case, read_solution
from discopf.cli import EXIT_ERROR, EXIT_FAILED, EXIT_OK, main, parse_kadj_list
from discopf.config import ConfigError, default_config, load_config, pipeline_options
from discopf.pipeline import PipelineOptions

T4 = str(bundled_case_path("t4_tap"))


def test_defaults_match_option_classes():
    opts = pipeline_options(default_config())
    ref = PipelineOptions()
    assert opts.homotopy == ref.homotopy
    assert opts.stage2 == ref.stage2
    assert opts.mode == ref.mode and opts.screen == ref.screen


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[homotopy]\nk_adj = 2\n[newton]\ngamma = 0.99\n")
    cfg = load_config(p, {"stage2": {"mode": "force"}})
    opts = pipeline_options(cfg)
    assert opts.homotopy.k_adj == 2.0 and isinstance(opts.homotopy.k_adj, float)
    assert opts.homotopy.newton.gamma == 0.99 and opts.stage2.newton.gamma == 0.99
    assert opts.mode == "force"


@pytest.mark.parametrize(
    "text, match",
    [("[homotopy]\nkadj = 1\n", "unknown config key 'homotopy.kadj'"), ("[newton]\ntol = 'x'\n", "wrong type"), ("[homotopy\n", "invalid")],
)
def test_config_errors(tmp_path, text, match):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(p)


def test_invalid_option_value(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[homotopy.step]\ngrowth = 0.5\n")
    with pytest.raises(ConfigError):
        pipeline_options(load_config(p))


def test_solve_writes_artifacts(tmp_path, capsys):
    assert main(["solve", T4, "--kadj", "0.1", "--out-dir", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "status=converged" in out and "objective=2822.1644" in out and "%Adj=100.0" in out
    for f in ("solution.json", "rounding.json", "trace_stage1.csv", "trace_stage2.csv", "solution_devices.csv"):
        assert (tmp_path / f).exists()
    sol = read_solution((tmp_path / "solution.json").read_text())
    assert sol.devices[0].setting == 0.95


def test_no_priors(tmp_path, capsys):
    assert main(["solve", T4, "--no-priors", "--out-dir", str(tmp_path)]) == EXIT_OK
    sol = read_solution((tmp_path / "solution.json").read_text())
    # the median 1.0 becomes the reference setting
    assert sol.devices[0].prior == 1.0


def test_stage2_force_and_off(tmp_path, capsys):
    # the "needed" flag is only measured in auto mode
    assert main(["solve", T4, "--stage2", "force", "--out-dir", str(tmp_path / "f")]) == EXIT_OK
    assert "stage2_needed=n/a" in capsys.readouterr().out
    nu2 = [float(r["nu2"]) for r in csv.DictReader(io.StringIO((tmp_path / "f" / "trace_stage2.csv").read_text()))]
    assert nu2[0] == 1.0 and nu2[-1] == 0.0 and len(nu2) > 2
    assert main(["solve", T4, "--stage2", "off", "--out-dir", str(tmp_path / "o")]) == EXIT_OK
    nu2 = [float(r["nu2"]) for r in csv.DictReader(io.StringIO((tmp_path / "o" / "trace_stage2.csv").read_text()))]
    assert nu2 == [0.0]
    assert main(["solve", T4, "--out-dir", str(tmp_path / "a")]) == EXIT_OK
    assert "stage2_needed=no" in capsys.readouterr().out


def test_missing_case(tmp_path, capsys):
    assert main(["solve", str(tmp_path / "missing.json")]) == EXIT_ERROR
    assert "not found" in capsys.readouterr().err


def test_bad_case(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{}")
    assert main(["solve", str(p), "--out-dir", str(tmp_path)]) == EXIT_ERROR
    assert "error:" in capsys.readouterr().err


def test_unsolvable_case_exits_nonzero(tmp_path, capsys):
    d = json.loads(bundled_case_path("t2").read_text())
    d["loads"][0]["p"] = 50.0
    p = tmp_path / "heavy.json"
    p.write_text(json.dumps(d))
    assert main(["solve", str(p), "--out-dir", str(tmp_path)]) == EXIT_FAILED
    assert json.loads((tmp_path / "solution.json").read_text())["status"] == "failed"


def test_sweep(tmp_path, capsys):
    t30 = str(bundled_case_path("t30"))
    assert main(["sweep", t30, "--kadj", "0,0.1", "--out-dir", str(tmp_path)]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((tmp_path / "sweep.csv").read_text())))
    assert [float(r["k_adj"]) for r in rows] == [0.0, 0.1]
    assert all(r["status"] == "converged" for r in rows)


def test_kadj_list():
    with pytest.warns(UserWarning, match="duplicate"):
        assert parse_kadj_list("0, 0.1,0.1") == [0.0, 0.1]
    with pytest.raises(ValueError):
        parse_kadj_list("")
    with pytest.raises(ValueError):
        parse_kadj_list("-1")


def test_compare(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["solve", T4, "--out-dir", str(a)])
    main(["solve", T4, "--kadj", "0", "--out-dir", str(b)])
    capsys.readouterr()
    assert main(["compare", str(a / "solution.json"), str(a / "solution.json"), "--out-dir", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("0 generator dispatch differences, 0 device setting differences")
    rows = list(csv.reader(io.StringIO((tmp_path / "compare.csv").read_text())))
    assert all(float(r[5]) == 0.0 for r in rows[1:])
    assert main(["compare", str(a / "solution.json"), str(b / "solution.json"), "--out-dir", str(tmp_path)]) == EXIT_OK


def test_compare_case_mismatch(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["solve", T4, "--out-dir", str(a)])
    main(["solve", str(bundled_case_path("t2")), "--out-dir", str(b)])
    assert main(["compare", str(a / "solution.json"), str(b / "solution.json")]) == EXIT_ERROR
    assert "different cases" in capsys.readouterr().err


def test_convert_round_trip(tmp_path, capsys):
    raw = bundled_case_path("r5_shunt.raw")
    out = tmp_path / "r5.json"
    assert main(["convert", str(raw), "-o", str(out)]) == EXIT_OK
    assert "AREA" in capsys.readouterr().err
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert parse_json_case(out.read_text()) == read_case(raw)


def test_convert_empty_file(tmp_path, capsys):
    p = tmp_path / "empty.raw"
    p.write_text("")
    assert main(["convert", str(p)]) == EXIT_ERROR
    assert "empty" in capsys.readouterr().err


def test_oracle_command(tmp_path, capsys):
    assert main(["oracle", T4, "--out-dir", str(tmp_path), "--cache", str(tmp_path / "cache")]) == EXIT_OK
    assert "5 combinations, 5 feasible" in capsys.readouterr().out
    assert len((tmp_path / "oracle.csv").read_text().splitlines()) == 6


def test_oracle_guard(tmp_path, capsys):
    p = tmp_path / "g.toml"
    p.write_text("[oracle]\nguard = 3\n")
    assert main(["oracle", T4, "--config", str(p), "--out-dir", str(tmp_path)]) == EXIT_ERROR
    assert "refusing to enumerate 5" in capsys.readouterr().err
