import copy
import csv
import json
import subprocess
import sys

import pytest
import yaml

from wgdelay.cli import run_command
from wgdelay.errors import ConfigError
from wgdelay.scenario import config_hash, load_scenario, scenario_from_dict


@pytest.fixture(scope="module")
def free_raw(scenario_dir):
    return yaml.safe_load((scenario_dir / "free.yaml").read_text())


def _header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def _invariant(raw):
    with pytest.raises(ConfigError) as info:
        scenario_from_dict(raw)
    return info.value.diagnostics["invariant"]


# -- scenario loading


def test_shipped_scenarios_validate(free_scenario, barrier_scenario, coupled_scenario):
    for scn in (free_scenario, barrier_scenario, coupled_scenario):
        assert len(scn.digest) == 64
        assert scn.r_max <= 0.5 * scn.config["time_domain"]["half_extent"]
    assert free_scenario.packet().channels == (0,)
    assert barrier_scenario.stencil_order == 4


def test_defaults_are_filled_in(free_raw):
    scn = scenario_from_dict(free_raw)
    tol = scn.tolerances
    assert tol["unitarity"] == 1e-6 and tol["reciprocity"] == 1e-6
    assert tol["eps_leak"] == 1e-8 and tol["norm"] == 1e-10
    assert scn.config["solver"]["n_closed"] == 4


def test_hash_is_stable_and_sensitive(free_raw):
    a = scenario_from_dict(free_raw).digest
    assert scenario_from_dict(copy.deepcopy(free_raw)).digest == a
    changed = copy.deepcopy(free_raw)
    changed["sweep"]["points"] = 203
    assert scenario_from_dict(changed).digest != a
    assert config_hash({"b": 1, "a": 2}) == config_hash({"a": 2, "b": 1})


@pytest.mark.parametrize("patch, invariant", [
    (lambda r: r["time_domain"].update(r_max=25.0), "r_max<=X/2"),
    (lambda r: r["sweep"].update(lambda_min=40.0), "sweep-order"),
    (lambda r: r["sweep"].update(lambda_min=9.0), "sweep-above-first-threshold"),
    (lambda r: r["sweep"].update(lambda_max=39.47), "threshold-window"),
    (lambda r: r["packet"]["components"][0].update(channel=9), "packet-channel-in-basis"),
    (lambda r: r["packet"]["components"][0].update(center_momentum=5.5), "packet-admissible"),
    (lambda r: r["sweep"].update(lambda_max=15.0), "packet-window-in-sweep"),
    (lambda r: r["time_domain"].update(dx=0.5), "nyquist"),
    (lambda r: r["time_domain"].update(t0=-2.0, t1=-3.0), "schema"),  # t0 < 0 < t1
    (lambda r: r.update(solver={"n_closed": 6}), "closed-channels-in-basis"),
    (lambda r: r["waveguide"].update(modes=0), "schema"),
    (lambda r: r.pop("packet"), "schema"),
    (lambda r: r["sweep"].update(stencil_order=3), "schema"),
    (lambda r: r.update(extra_section={}), "schema"),
])
def test_invalid_scenarios_name_the_invariant(free_raw, patch, invariant):
    raw = copy.deepcopy(free_raw)
    patch(raw)
    assert _invariant(raw) == invariant


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_scenario(tmp_path / "missing.yaml")
    assert info.value.diagnostics["invariant"] == "readable"
    bad = tmp_path / "bad.yaml"
    bad.write_text("waveguide: {width: [1.0\n")
    with pytest.raises(ConfigError) as info:
        load_scenario(bad)
    assert info.value.diagnostics["invariant"] == "parseable"


# -- commands


def test_malformed_scenario_exits_2_with_report(free_raw, tmp_path, capsys):
    raw = copy.deepcopy(free_raw)
    raw["time_domain"]["r_max"] = 25.0
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(raw))
    out = tmp_path / "out"
    assert run_command(["smatrix", "--scenario", str(path), "--output", str(out)]) == 2
    report = json.loads(capsys.readouterr().err)
    assert report["error"] == "config-validation"
    assert report["diagnostics"]["invariant"] == "r_max<=X/2"
    assert report["command"] == "smatrix"
    assert json.loads((out / "error.json").read_text())["diagnostics"]["invariant"] == "r_max<=X/2"


def test_delay_rejects_oversized_r_max_flag(scenario_dir, tmp_path, capsys):
    code = run_command(["delay", "--scenario", str(scenario_dir / "free.yaml"), "--output", str(tmp_path),
                        "--r-max", "30"])
    assert code == 2
    assert json.loads(capsys.readouterr().err)["diagnostics"]["invariant"] == "r_max<=X/2"


def test_modes_command(scenario_dir, tmp_path):
    assert run_command(["modes", "--scenario", str(scenario_dir / "coupled.yaml"), "--output", str(tmp_path)]) == 0
    assert _header(tmp_path / "coupling.csv") == ["x", "alpha", "beta", "value"]
    summary = json.loads((tmp_path / "modes.json").read_text())
    assert summary["packet_open_channels"] == [1, 2]
    assert len(summary["config_hash"]) == 64


def test_smatrix_outputs_and_thread_determinism(scenario_dir, tmp_path):
    scn = str(scenario_dir / "barrier.yaml")
    a, b = tmp_path / "t1", tmp_path / "t4"
    assert run_command(["smatrix", "--scenario", scn, "--output", str(a), "--threads", "1"]) == 0
    assert run_command(["smatrix", "--scenario", scn, "--output", str(b), "--threads", "4"]) == 0
    assert _header(a / "smatrix.csv") == ["lambda", "row", "col", "re", "im"]
    assert _header(a / "tau_ew.csv") == ["lambda", "row", "col", "re", "im"]
    assert _header(a / "residuals.csv") == ["lambda", "open_channels", "unitarity", "reciprocity", "condition",
                                            "hermiticity"]
    with open(a / "residuals.csv", newline="") as fh:
        unit = [float(r["unitarity"]) for r in csv.DictReader(fh)]
    assert len(unit) == 401 and max(unit) <= 1e-6
    summary = json.loads((a / "smatrix.json").read_text())
    assert summary["ok"] and summary["residuals"]["unitarity_max"] <= 1e-6
    for name in ("smatrix.csv", "tau_ew.csv", "residuals.csv", "smatrix.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert not list(a.glob(".*.tmp"))


def test_sojourn_command(scenario_dir, tmp_path):
    assert run_command(["sojourn", "--scenario", str(scenario_dir / "free.yaml"), "--output", str(tmp_path)]) == 0
    assert _header(tmp_path / "sojourn_free.csv") == ["r", "T0_r_phi", "T0_r_Sphi", "tau_r_free"]
    assert _header(tmp_path / "fiber.csv") == ["lambda", "alpha", "direction", "re", "im"]
    summary = json.loads((tmp_path / "sojourn.json").read_text())
    assert max(abs(v) for v in summary["tau_free"]) < 1e-8
    assert summary["fiber_norm"] == pytest.approx(summary["packet_norm"], rel=1e-8)


def test_output_directory_override(scenario_dir, tmp_path, monkeypatch):
    env_dir = tmp_path / "from_env"
    monkeypatch.setenv("WGDELAY_OUTPUT_DIR", str(env_dir))
    assert run_command(["modes", "--scenario", str(scenario_dir / "free.yaml")]) == 0
    assert (env_dir / "modes.json").exists()
    flag_dir = tmp_path / "from_flag"
    assert run_command(["modes", "--scenario", str(scenario_dir / "free.yaml"), "--output", str(flag_dir)]) == 0
    assert (flag_dir / "modes.json").exists()


def test_verify_free_suite_via_console_script(scenario_dir, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "wgdelay.cli", "verify", "--suite", "free",
                           "--scenario", str(scenario_dir / "free.yaml"), "--output", str(tmp_path)],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    lines = proc.stdout.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["failed"] == 0
    names = {c["name"] for c in report["checks"]["free"]}
    assert {"smatrix_identity", "tau_r_zero", "tau_free_zero"} <= names


def test_verify_rejects_inapplicable_suite(scenario_dir, tmp_path):
    code = run_command(["verify", "--suite", "oracle", "--scenario", str(scenario_dir / "coupled.yaml"),
                        "--output", str(tmp_path)])
    assert code == 2
