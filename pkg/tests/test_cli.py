import csv
import json
import subprocess
import sys

import pytest

from kslab.cli import ConfigError, main, read_config, resolve


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def _run(cfg, out, *extra):
    return main(["run", "--config", str(cfg), "--out-dir", str(out), *extra])


def _rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_simulate_zero_data_gives_zero_series(tmp_path):
    cfg = _write(tmp_path, "sim.ini", "[experiment]\nkind = simulate\npaths = 4\n[simulate]\nn_steps = 20\n")
    assert _run(cfg, tmp_path / "out") == 0
    rows = _rows(tmp_path / "out" / "series.csv")
    assert rows[0] == ["t", "mean_energy", "mean_y1", "mean_z1"]
    assert len(rows) == 22
    assert all(float(v) == 0 for r in rows[1:] for v in r[1:])
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["kind"] == "simulate" and rep["config"]["simulate"]["n_steps"] == 20


def test_simulate_reruns_are_byte_identical(tmp_path):
    cfg = _write(tmp_path, "sim.ini",
                 "[experiment]\nkind = simulate\npaths = 6\nseed = 11\n[simulate]\ny0 = 1, 0.5\nz0 = 0.2\n")
    assert _run(cfg, tmp_path / "a") == 0
    assert _run(cfg, tmp_path / "b") == 0
    for f in ("series.csv", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert _run(cfg, tmp_path / "c", "--seed", "12") == 0
    assert (tmp_path / "a" / "series.csv").read_bytes() != (tmp_path / "c" / "series.csv").read_bytes()


def test_certificate_report_fields(tmp_path):
    cfg = _write(tmp_path, "cert.ini",
                 "[experiment]\nkind = certificate\npaths = 12\n"
                 "[certificate]\nsteps_per_block = 40\ntail_steps = 10\nchunk = 5\n")
    assert _run(cfg, tmp_path / "out") == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    res = rep["result"]
    for key in ("delta", "epsilon", "R", "exceedance_count", "markov_bound"):
        assert key in res
    assert rep["C_hat"] == pytest.approx(res["C_hat"])
    assert res["epsilon"] == 0.1
    rows = _rows(tmp_path / "out" / "series.csv")
    assert rows[0][:4] == ["delta", "epsilon", "R", "exceedance_count"]


def test_certificate_workers_do_not_change_output(tmp_path):
    cfg = _write(tmp_path, "cert.ini",
                 "[experiment]\nkind = certificate\npaths = 8\n"
                 "[certificate]\nsteps_per_block = 30\ntail_steps = 10\nchunk = 4\n")
    assert _run(cfg, tmp_path / "a") == 0
    assert _run(cfg, tmp_path / "b", "--workers", "2") == 0
    assert (tmp_path / "a" / "series.csv").read_bytes() == (tmp_path / "b" / "series.csv").read_bytes()


def test_json_config_equivalent_to_ini(tmp_path):
    ini = _write(tmp_path, "p.ini", "[experiment]\nkind = probe\n[probe]\nprobe = spectral\nband_modes = 1, 2, 3\n")
    js = _write(tmp_path, "p.json", json.dumps({"experiment": {"kind": "probe"},
                                                "probe": {"probe": "spectral", "band_modes": [1, 2, 3]}}))
    assert _run(ini, tmp_path / "a") == 0
    assert _run(js, tmp_path / "b") == 0
    assert (tmp_path / "a" / "series.csv").read_bytes() == (tmp_path / "b" / "series.csv").read_bytes()


@pytest.mark.parametrize(
    "text, field",
    [
        ("[experiment]\nkind = source-term\n[weights]\nM = -1\n", "weights.M"),
        ("[experiment]\nkind = source-term\n[weights]\nQ = 1.5\n", "weights.Q"),
        ("[experiment]\nkind = simulate\n[simulate]\nfoo = 1\n", "simulate.foo"),
        ("[experiment]\nkind = probe\n[weights]\nT = 0.5\n", "weights"),
        ("[experiment]\nkind = nope\n", "experiment.kind"),
        ("[experiment]\nkind = simulate\npaths = 0\n", "experiment.paths"),
        ("[experiment]\nkind = probe\n[probe]\nd0 = 0.7, 0.3\n", "probe.d0"),
        ("[experiment]\nkind = simulate\nn_modes = 2\n[simulate]\ny0 = 1, 2, 3\n", "simulate.y0"),
    ],
)
def test_validation_errors_exit_2_and_name_field(tmp_path, capsys, text, field):
    cfg = _write(tmp_path, "bad.ini", text)
    assert _run(cfg, tmp_path / "out") == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "validation" and err["field"] == field
    assert not (tmp_path / "out").exists()


def test_missing_config_exits_2(tmp_path, capsys):
    assert _run(tmp_path / "missing.ini", tmp_path / "out") == 2
    assert json.loads(capsys.readouterr().err)["field"] == "config"


def test_runtime_error_exits_1(tmp_path, capsys):
    # without coupling the second component is invisible: Gramian singular
    cfg = _write(tmp_path, "band.ini",
                 "[experiment]\nkind = probe\n[model]\na3 = 0\n[probe]\nprobe = band\nband_k = 2\n")
    assert _run(cfg, tmp_path / "out") == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "runtime" and err["type"] == "UnobservableBandError"


def test_resolve_defaults_and_overrides():
    cfg = resolve({"experiment": {"kind": "lr-control"}}, {"seed": 5, "paths": None})
    assert cfg["experiment"]["seed"] == 5 and cfg["experiment"]["paths"] == 20
    assert cfg["lr-control"]["d0"] == [0.3, 0.7] and cfg["lr-control"]["adapt"] is True
    with pytest.raises(ConfigError):
        resolve({"experiment": {}})


def test_ini_keeps_key_case(tmp_path):
    p = _write(tmp_path, "w.ini", "[weights]\nM = 2\nT = 0.4\n")
    assert read_config(p) == {"weights": {"M": "2", "T": "0.4"}}


@pytest.mark.parametrize("probe", ["spectral", "band", "clamped", "duality"])
def test_probe_kinds_run(tmp_path, probe):
    extra = {"clamped": "n_points = 16\nn_data = 1\n", "duality": "n_points = 16\nalpha = 1e-8\n",
             "band": "band_k = 2\n", "spectral": "band_modes = 1, 2\n"}[probe]
    cfg = _write(tmp_path, "p.ini", f"[experiment]\nkind = probe\npaths = 4\n[probe]\nprobe = {probe}\n{extra}")
    assert _run(cfg, tmp_path / "out") == 0
    rows = _rows(tmp_path / "out" / "series.csv")
    assert len(rows) >= 2


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, "sim.ini", "[experiment]\nkind = simulate\npaths = 2\n[simulate]\nn_steps = 5\n")
    r = subprocess.run([sys.executable, "-m", "kslab", "run", "--config", str(cfg), "--out-dir", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "series.csv").exists()
