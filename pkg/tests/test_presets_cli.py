import json
import re
from importlib import resources

import numpy as np
import pytest

from lcmembrane.cli import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_OK, EXIT_SOLVER, main
from lcmembrane.io import read_csv, read_field
from lcmembrane.presets import PRESET_NAMES, ConfigError, load_config, load_preset


def _preset_text(name):
    return resources.files("lcmembrane").joinpath("configs", f"{name}.ini").read_text()


def _small_config(tmp_path, name="nondegenerate-small", T="0.1", dt="2e-3", extra=None):
    text = re.sub(r"(?m)^T = .*$", f"T = {T}", _preset_text(name), count=1)
    text = re.sub(r"(?m)^dt = .*$", f"dt = {dt}", text, count=1)
    for key, val in (extra or {}).items():
        text = re.sub(rf"(?m)^{key} = .*$", f"{key} = {val}", text, count=1)
    p = tmp_path / f"{name}-small.ini"
    p.write_text(text)
    return p


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_presets_load(name):
    pre = load_preset(name)
    assert pre.name == name and pre.epsilon > 0 and pre.dt > 0
    sch = pre.schedule(4)
    assert sch.N_l(1) == 2


def test_config_rejections(tmp_path):
    with pytest.raises(ConfigError):
        load_preset("no-such-preset")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    base = _preset_text("nondegenerate-small")
    cases = {
        "key": base.replace("[solver]", "[solver]\nbogus = 1"),
        "section": base + "\n[extra]\nx = 1\n",
        "grid": base.replace("grid = 32", "grid = 30"),
        "eps": base.replace("epsilon = 1e-3", "epsilon = 2.0"),
        "syntax": "[problem\n",
    }
    for label, text in cases.items():
        p = tmp_path / f"{label}.ini"
        p.write_text(text)
        with pytest.raises(ConfigError):
            load_config(p)


def test_override_keeps_original():
    pre = load_preset("nondegenerate-small")
    small = pre.override(grid=16, dt=1e-3)
    assert (small.n, small.dt) == (16, 1e-3)
    assert (pre.n, pre.dt) == (32, 2.5e-4)


def test_cli_config_errors(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["simulate", "--preset", "nondegenerate-small", "--grid", "12", "--out-dir", out]) == EXIT_CONFIG
    assert main(["nash-moser", "--lambda", "big", "--out-dir", out]) == EXIT_CONFIG
    assert main(["nash-moser", "--levels", "0", "--out-dir", out]) == EXIT_CONFIG
    assert main(["nash-moser", "--preset", "relaxed-levi", "--out-dir", out]) == EXIT_CONFIG
    assert main(["energy-check", "--preset", "degenerate-zero", "--out-dir", out]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_cfl_failure(tmp_path):
    cfg = _small_config(tmp_path, T="0.2", dt="0.05")
    assert main(["simulate", "--config", str(cfg), "--grid", "16", "--quiet", "--out-dir", str(tmp_path)]) == EXIT_SOLVER


def test_cli_simulate_membrane(tmp_path):
    cfg = _small_config(tmp_path, dt="1e-2")
    out = tmp_path / "sim"
    code = main(["simulate", "--config", str(cfg), "--grid", "16", "--mode", "membrane", "--quiet", "--out-dir", str(out)])
    assert code == EXIT_OK
    summary = json.loads((out / "simulate.json").read_text())
    assert summary["constraint_sup"] <= 1e-6 and summary["hamiltonian_drift"] <= 1e-4
    v, g = read_field(out / "v.bin")
    assert v.shape == (11 * 4, 16, 16) and g.n1 == 16
    assert len(read_csv(out / "constraint.csv")["t"]) == 11


def test_cli_simulate_linear_preset(tmp_path):
    out = tmp_path / "lin"
    assert main(["simulate", "--preset", "relaxed-levi", "--grid", "16", "--quiet", "--out-dir", str(out)]) == EXIT_OK
    assert json.loads((out / "simulate.json").read_text())["linear_only"]


def _strip_clock(d):
    for row in d["levels"]:
        row.pop("wallclock_ms", None)
    d.pop("wallclock_ms", None)
    d.pop("total_wallclock_ms", None)
    return d


def test_cli_nash_moser_is_deterministic(tmp_path):
    cfg = _small_config(tmp_path)
    runs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["nash-moser", "--config", str(cfg), "--grid", "16", "--epsilon", "1e-2", "--quiet", "--out-dir", str(out)]) == EXIT_OK
        runs.append(json.loads((out / "convergence.json").read_text()))
        assert (out / "convergence.csv").exists() and (out / "W_limit.bin").exists()
    assert runs[0]["converged"] and runs[0]["d_fit"] < 1
    assert _strip_clock(runs[0]) == _strip_clock(runs[1])


def test_cli_nash_moser_divergence_exit(tmp_path):
    cfg = _small_config(tmp_path, extra={"v0_amplitude": "1000"})
    code = main(["nash-moser", "--config", str(cfg), "--grid", "16", "--epsilon", "0.5", "--quiet", "--out-dir", str(tmp_path / "d")])
    assert code == EXIT_DIVERGENCE


def test_cli_energy_check(tmp_path):
    out = tmp_path / "e"
    code = main(["energy-check", "--preset", "degenerate-tiny", "--grid", "16", "--lemma", "2.5", "--quiet", "--out-dir", str(out)])
    assert code == EXIT_OK
    rep = json.loads((out / "energy_report.json").read_text())
    assert rep["pass"] and np.isfinite(rep["lambda"])
    assert {"lambda", "constants", "margins", "meta"} <= set(rep)


def test_cli_convergence_report_and_uniqueness(tmp_path):
    cfg = _small_config(tmp_path)
    args = ["--config", str(cfg), "--grid", "16", "--epsilon", "1e-2", "--quiet"]
    out = tmp_path / "c"
    assert main(["convergence-report", *args, "--out-dir", str(out)]) == EXIT_OK
    cmp_ = json.loads((out / "oracle_compare.json").read_text())
    assert cmp_["compare"]["aggregate"]["rel_l2"] <= 1e-2
    out = tmp_path / "u"
    assert main(["uniqueness", *args, "--out-dir", str(out)]) == EXIT_OK
    assert json.loads((out / "uniqueness.json").read_text())["agree"]


def test_cli_rescale_compare(tmp_path):
    cfg = _small_config(tmp_path)
    out = tmp_path / "r"
    code = main(["rescale-compare", "--config", str(cfg), "--grid", "16", "--epsilon", "1e-2", "--quiet", "--out-dir", str(out)])
    assert code == EXIT_OK
    d = json.loads((out / "rescale_compare.json").read_text())
    assert d["horizon"] == pytest.approx(1.0) and not d["blown_up"]
    assert d["compare"]["aggregate"]["rel_l2"] <= 1e-2
    assert len(read_csv(out / "rescale_compare.csv")["t"]) > 1
