import json

import numpy as np
import pytest

from drough.cli import PRESETS, main, resolve_config, UsageError
from drough.driver import load_driver, sample_fbm
from drough.scale import Grid


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


SMALL = {"grid": {"n_steps": 32}, "driver": {"subgrid_factor": 2}, "initial": {"K": 4}}


def test_gen_driver_round_trip(tmp_path):
    cfg = write_config(tmp_path / "c.json", SMALL)
    assert main(["gen-driver", "--config", cfg, "--out", str(tmp_path), "--seed", "3"]) == 0
    drv = load_driver(tmp_path / "driver-fbm_symmetric-3.drpd")
    want = sample_fbm(3, 0.45, Grid.with_delay(1.0, 32, 0.25), 1, 2)
    assert drv == want
    side = json.loads((tmp_path / "driver-fbm_symmetric-3.json").read_text())
    assert side["seed"] == 3 and side["chen_residual"] <= side["chen_tolerance"]


def test_gen_driver_seeds_differ(tmp_path):
    cfg = write_config(tmp_path / "c.json", SMALL)
    for s in ("1", "2"):
        assert main(["gen-driver", "--config", cfg, "--out", str(tmp_path), "--seed", s]) == 0
    a = (tmp_path / "driver-fbm_symmetric-1.drpd").read_bytes()
    b = (tmp_path / "driver-fbm_symmetric-2.drpd").read_bytes()
    assert a != b


def test_validate_passes(tmp_path):
    cfg = write_config(tmp_path / "c.json", SMALL)
    assert main(["validate", "--config", cfg, "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "validate.json").read_text())
    assert report["failed"] == []
    assert len(report["smoothing_table"]) == 5


def test_validate_detects_defect(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {**SMALL, "validate": {"inject_defect": {"cell": 12, "amount": 1.0}}})
    assert main(["validate", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "chen_area" in capsys.readouterr().err
    assert "chen_area" in json.loads((tmp_path / "validate.json").read_text())["failed"]


def test_solve_ode_preset(tmp_path):
    assert main(["solve", "--preset", "ode", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "solve.json").read_text())
    assert summary["final_norm_theta"] == pytest.approx(np.exp(-1.0), abs=1e-5)
    lines = (tmp_path / "solve.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert any(line.startswith("# seed=") for line in lines)
    assert any(line.startswith("# version=") for line in lines)
    assert "t,norm_theta,norm_theta_minus_alpha,picard_iterations" in lines


def test_solve_rerun_identical(tmp_path):
    cfg = write_config(tmp_path / "c.json", SMALL)
    for sub in ("a", "b"):
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / sub), "--seed", "5"]) == 0
    assert (tmp_path / "a" / "solve.csv").read_bytes() == (tmp_path / "b" / "solve.csv").read_bytes()


def test_solve_from_driver_file(tmp_path):
    cfg = write_config(tmp_path / "c.json", SMALL)
    main(["gen-driver", "--config", cfg, "--out", str(tmp_path), "--seed", "4"])
    path = str(tmp_path / "driver-fbm_symmetric-4.drpd")
    cfg2 = write_config(tmp_path / "c2.json", {**SMALL, "driver": {"subgrid_factor": 2, "path": path}})
    assert main(["solve", "--config", cfg2, "--out", str(tmp_path / "file")]) == 0
    assert main(["solve", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "fresh")]) == 0
    a = np.loadtxt(tmp_path / "file" / "solve.csv", delimiter=",", skiprows=4)
    b = np.loadtxt(tmp_path / "fresh" / "solve.csv", delimiter=",", skiprows=4)
    assert np.allclose(a, b, rtol=1e-10, atol=1e-12)


def test_missing_driver_file(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"driver": {"path": str(tmp_path / "nope.drpd")}})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("doc", [{"preset": "nope"}, {"solver": {}}])
def test_bad_config_exits_2(tmp_path, doc):
    cfg = write_config(tmp_path / "c.json", doc)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_unreadable_config(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["solve", "--config", str(tmp_path / "c.json")]) == 2
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == 2


def test_unknown_preset_flag():
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--preset", "nope"])
    assert exc.value.code == 2


def test_presets_resolve():
    for name in PRESETS:
        cfg = resolve_config({"preset": name})
        assert set(cfg) == {"grid", "driver", "model", "initial", "validate", "converge", "stability"}
    with pytest.raises(UsageError):
        resolve_config({"bogus": 1})


def test_converge_small(tmp_path):
    cfg = write_config(tmp_path / "c.json", {
        "initial": {"K": 4},
        "converge": {"r_list": [0.2, 0.1], "seeds": 2, "n_steps": 40, "subgrid_factor": 2}})
    assert main(["converge", "--config", cfg, "--out", str(tmp_path), "--threads", "2"]) == 0
    rows = [line for line in (tmp_path / "converge.csv").read_text().splitlines() if not line.startswith("#")]
    assert rows[0] == "r,median_rho,median_h,slope" and len(rows) == 3
    cells = [line for line in (tmp_path / "converge_cells.csv").read_text().splitlines() if not line.startswith("#")]
    assert len(cells) == 1 + 4


def test_converge_threads_match_serial(tmp_path):
    cfg = write_config(tmp_path / "c.json", {
        "initial": {"K": 4},
        "converge": {"r_list": [0.2, 0.1], "seeds": 2, "n_steps": 40, "subgrid_factor": 2}})
    main(["converge", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["converge", "--config", cfg, "--out", str(tmp_path / "b"), "--threads", "2"])
    assert (tmp_path / "a" / "converge.csv").read_bytes() == (tmp_path / "b" / "converge.csv").read_bytes()


def test_stability_small(tmp_path):
    cfg = write_config(tmp_path / "c.json", {**SMALL, "stability": {"magnitudes": [1e-3, 1e-2]}})
    assert main(["stability", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = [line.split(",") for line in (tmp_path / "stability.csv").read_text().splitlines()
            if not line.startswith("#")]
    assert rows[0] == ["kind", "magnitude", "rho", "U"]
    assert {r[0] for r in rows[1:]} == {"initial", "driver"}
    assert all(float(r[2]) > 0 for r in rows[1:])


def test_stability_rejects_deterministic(tmp_path):
    assert main(["stability", "--preset", "ode", "--out", str(tmp_path)]) == 2


def test_bad_seed():
    assert main(["solve", "--seed", "-1"]) == 2


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("drough ")
