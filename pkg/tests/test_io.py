import json
import os

import pytest

from fbflow import __version__
from fbflow.cli import main
from fbflow.io import (EXIT_ANALYSIS, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, EXIT_VALIDATION, ConfigError,
                       atomic_write, csv_bytes, load_config, parse_config, run)

from conftest import case_config


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return p


def minimal(tmp_path):
    cfg = case_config("A", out=tmp_path / "out")
    del cfg["grid"], cfg["flow"]
    return cfg


def test_defaults_are_filled(tmp_path):
    cfg = load_config(write(tmp_path, minimal(tmp_path)))
    assert cfg.flow["rtol"] == 1e-10 and cfg.solver["lcp_tol"] == 1e-10
    assert cfg.solver["omega"] == 0.5
    assert cfg.grid["N_w"] == cfg.grid["N_s"] == 65
    assert cfg.to_dict()["solver"]["method"] == "search"


def test_missing_field_names_it(tmp_path):
    doc = minimal(tmp_path)
    del doc["fields"]["H2"]
    with pytest.raises(ConfigError, match="fields.H2"):
        load_config(write(tmp_path, doc))


@pytest.mark.parametrize("section, key, value, match", [
    ("solver", "omega", 1.5, "solver.omega"),
    ("solver", "omega", 0, "solver.omega"),
    ("grid", "N_w", 2, "grid.N_w"),
    ("grid", "N_s", 3.5, "grid.N_s"),
    ("solver", "method", "newton", "solver.method"),
    ("grid", "t_low_mode", "top", "grid.t_low_mode"),
    ("solver", "warm_start", 1, "solver.warm_start"),
    ("solver", "bogus", 1, "solver.bogus"),
    ("flow", "w_range", [0.5, 0.1], "flow.w_range"),
])
def test_range_and_schema_errors(tmp_path, section, key, value, match):
    doc = minimal(tmp_path)
    doc.setdefault(section, {})[key] = value
    with pytest.raises(ConfigError, match=match.replace(".", r"\.")):
        parse_config(doc)


def test_parse_error_has_location(tmp_path):
    p = write(tmp_path, '{\n  "geometry": {,\n}')
    with pytest.raises(ConfigError, match=r"cfg\.json:2:16: Expecting property name"):
        load_config(p)


def test_expression_error_is_a_config_error(tmp_path):
    doc = minimal(tmp_path)
    doc["fields"]["beta"] = "z +* 2"
    with pytest.raises(ConfigError, match="fields.beta"):
        parse_config(doc)


def test_unknown_section_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config({**minimal(tmp_path), "extras": {}})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")


def test_config_hash_is_stable(tmp_path):
    a = parse_config(minimal(tmp_path))
    b = parse_config(json.loads(json.dumps(minimal(tmp_path))))
    assert a.config_hash() == b.config_hash()
    assert a.with_overrides(tol=1e-9).config_hash() != a.config_hash()


def test_overrides(tmp_path):
    cfg = parse_config(minimal(tmp_path)).with_overrides(out=str(tmp_path / "x"), grid=(9, 17), tol=1e-8)
    assert cfg.grid == {"N_w": 9, "N_s": 17, "t_low_mode": "alpha_minus"}
    assert cfg.solver["lcp_tol"] == 1e-8
    assert cfg.outputs["directory"] == str(tmp_path / "x")


def test_atomic_write_leaves_no_temporaries(tmp_path):
    target = tmp_path / "d" / "a.csv"
    atomic_write(target, b"x\n")
    atomic_write(target, b"y\n")
    assert target.read_bytes() == b"y\n"
    assert sorted(os.listdir(tmp_path / "d")) == ["a.csv"]


def test_atomic_write_failure_keeps_old_file(tmp_path, monkeypatch):
    target = tmp_path / "a.csv"
    atomic_write(target, b"old\n")

    def boom(*args):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write(target, b"new\n")
    assert target.read_bytes() == b"old\n"
    assert os.listdir(tmp_path) == ["a.csv"]


def test_csv_is_round_trip_exact():
    data = csv_bytes(("a", "b"), [(0.1, 1), (1 / 3, True)]).decode().splitlines()
    assert data == ["a,b", "0.1,1", "0.3333333333333333,1"]
    assert float(data[2].split(",")[0]) == 1 / 3


def test_validate_command(tmp_path):
    cfg = parse_config(case_config("A", 9, tmp_path / "o"))
    rep = run(cfg, "validate")
    assert rep.exit_code == EXIT_OK
    names = [c["name"] for c in rep.checks]
    assert len(names) == len(set(names))
    assert all(c["passed"] for c in rep.checks if c["kind"] == "assertion")
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["provenance"]["version"] == __version__
    assert report["provenance"]["config_hash"] == cfg.config_hash()
    assert set(report["artifacts"]) == {"config.json", "validation.json"}


def test_validation_failure_exit_code(tmp_path):
    doc = case_config("A", 9, tmp_path / "o")
    doc["fields"]["beta"] = "-z"
    rep = run(parse_config(doc), "solve")
    assert rep.exit_code == EXIT_VALIDATION
    assert "beta_monotone" in rep.error
    assert not (tmp_path / "o" / "solution.csv").exists()


def test_flow_and_solve_artifacts(tmp_path):
    cfg = parse_config(case_config("B", 9, tmp_path / "o"))
    rep = run(cfg, "solve")
    assert rep.exit_code == EXIT_OK
    out = tmp_path / "o"
    header = {name: (out / name).read_text().splitlines()[0] for name in
              ("orbits.csv", "grid.csv", "solution.csv", "trace.csv")}
    assert header["orbits.csv"] == "w,t,x1,x2,Y_h"
    assert header["grid.csv"] == "w,s,t,x1,x2,h,a11,a12,a21,a22,mu"
    assert header["solution.csv"] == "w,s,t,x1,x2,u,chi"
    assert header["trace.csv"].startswith("iteration,phase,delta_chi")
    assert len((out / "solution.csv").read_text().splitlines()) == 82
    res = json.loads((out / "residuals.json").read_text())
    assert res["converged"] is True and res["complementarity_defect"] == 0.0


def test_csv_subset(tmp_path):
    doc = case_config("B", 9, tmp_path / "o")
    doc["outputs"]["csv"] = ["solution"]
    run(parse_config(doc), "solve")
    assert not (tmp_path / "o" / "orbits.csv").exists()
    assert (tmp_path / "o" / "solution.csv").exists()


def test_check_continuity_artifacts(tmp_path):
    rep = run(parse_config(case_config("C", 17, tmp_path / "o")), "check-continuity")
    assert rep.exit_code == EXIT_OK
    lines = (tmp_path / "o" / "free_boundary.csv").read_text().splitlines()
    assert lines[0] == "w,Phi_h,x1,x2,exit_on_gamma3,lhs_35,rhs_35,margin"
    assert len(lines) == 18
    assert rep.analysis["continuity"]["columns_holding"] == 17


def test_solver_failure_exit_code(tmp_path):
    doc = case_config("C", 9, tmp_path / "o")
    doc["solver"] = {"max_outer": 1, "method": "damped"}
    rep = run(parse_config(doc), "solve")
    assert rep.exit_code == EXIT_SOLVER
    assert "did not converge" in rep.error


def test_assertion_failure_exit_code(tmp_path, monkeypatch):
    import fbflow.io as io_mod

    real = io_mod.check_monotonicity

    def broken(*args, **kwargs):
        rep = real(*args, **kwargs)
        rep.min_bump_integral = -1.0
        return rep

    monkeypatch.setattr(io_mod, "check_monotonicity", broken)
    rep = run(parse_config(case_config("B", 9, tmp_path / "o")), "check-continuity")
    assert rep.exit_code == EXIT_ANALYSIS
    assert "monotonicity_weak" in rep.error


def test_cli_exit_codes(tmp_path, capsys):
    good = write(tmp_path, case_config("A", 9, tmp_path / "o"))
    assert main(["validate", "--config", str(good)]) == EXIT_OK
    assert main(["validate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["explode", "--config", str(good)]) == EXIT_CONFIG
    assert main(["solve", "--config", str(good), "--grid", "nine"]) == EXIT_CONFIG
    bad = case_config("A", 9, tmp_path / "o")
    bad["fields"]["beta"] = "z +"
    out = tmp_path / "bad_out"
    assert main(["solve", "--config", str(write(tmp_path, bad, "bad.json")), "--out", str(out)]) == EXIT_CONFIG
    report = json.loads((out / "report.json").read_text())
    assert report["exit_code"] == EXIT_CONFIG and "fields.beta" in report["error"]


def test_cli_overrides_grid_and_out(tmp_path, capsys):
    cfg = write(tmp_path, case_config("B", 33, tmp_path / "ignored"))
    out = tmp_path / "o"
    assert main(["solve", "--config", str(cfg), "--out", str(out), "--grid", "5x7", "--tol", "1e-9"]) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["grid"]["N_w"] == 5 and echoed["grid"]["N_s"] == 7
    assert echoed["solver"]["lcp_tol"] == 1e-9
    assert len((out / "solution.csv").read_text().splitlines()) == 36
    assert not (tmp_path / "ignored").exists()
    assert "exit code 0" in capsys.readouterr().out
