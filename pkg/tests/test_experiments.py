from __future__ import annotations

import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from sislab import cli, experiments
from sislab.equilibrium import NumericalFailure
from sislab.experiments import (ModelConfig, emit_plot, list_presets, load_config, load_preset, run_figure_preset,
                                sweep_dI, theta_matches)

SVG = "{http://www.w3.org/2000/svg}"

FIGURE_IDS = ["fig1a", "fig1b", "fig1c", "fig2a", "fig2b", "fig2c", "fig3a", "fig3b", "fig3c",
              "fig4a", "fig4b", "fig5a", "fig5b", "fig6a", "fig6b", "fig6c"]


def test_preset_catalogue():
    ids = list_presets()
    assert len(ids) == len(set(ids))
    assert set(FIGURE_IDS) <= set(ids)
    with pytest.raises(KeyError):
        load_preset("fig9z")


@pytest.mark.parametrize("pid", FIGURE_IDS + ["boundary_atom", "boundary_interval"])
def test_preset_theta_reproduced(pid):
    assert theta_matches(load_preset(pid))


def test_preset_caption_parameters():
    p = load_preset("fig1a").config
    assert (p.L, p.N, p.dS, p.dI) == (1.0, 2.0, 1.0, 1e-7)
    p = load_preset("fig3c").config
    assert (p.dS, p.dI, p.Lambda) == (1.0, 1e-8, 10.0)
    assert load_preset("fig4a").config.dI == 1e-10
    for pid in ("fig5a", "fig5b", "fig6a", "fig6b", "fig6c"):
        assert load_preset(pid).config.dI == 1e-5
    assert load_preset("fig6a").slopes == (-10, 10)


def test_config_validation(tmp_path):
    base = {"model": "conserved", "L": 1.0, "N": 2.0, "dS": 1.0, "dI": 1e-3, "beta": "1", "risk": "1/2+x"}
    ModelConfig.from_mapping(base)
    with pytest.raises(ValueError):
        ModelConfig.from_mapping({**base, "model": "sir"})
    with pytest.raises(ValueError):
        ModelConfig.from_mapping({**base, "gamma": "1"})
    with pytest.raises(ValueError):
        ModelConfig.from_mapping({**base, "colour": "red"})
    path = tmp_path / "m.yaml"
    path.write_text("model: conserved\nL: 1\nN: 2\ndS: 1\ndI: 0.001\nbeta: '1'\ngamma: '1/2+x'\n")
    cfg = load_config(path)
    assert cfg.gamma == "1/2+x" and cfg.grid_n == 961
    assert cfg.coefficients().gamma(0.5) == pytest.approx(1.0)


def test_dS_from_critical_factor():
    from sislab.coefficients import risk_function
    from sislab.limits import critical_dS

    cfg = load_preset("boundary_atom").config
    d = critical_dS(risk_function(cfg.coefficients()), cfg.Lambda)
    assert cfg.resolved_dS() == pytest.approx(2 * d)
    assert load_preset("boundary_interval").config.resolved_dS() == pytest.approx(d / 2)


# -- SVG ---------------------------------------------------------------------------

def _polylines(path):
    root = ET.parse(path).getroot()
    return root.findall(f"{SVG}polyline")


def test_emit_plot_constant_fields(tmp_path):
    x = np.linspace(0, 1, 11)
    out = emit_plot({"x": x, "a": np.full(11, 2.0), "b": np.full(11, -1.0)}, tmp_path / "c.svg")
    lines = _polylines(out)
    assert len(lines) == 2
    for pl in lines:
        ys = {p.split(",")[1] for p in pl.get("points").split()}
        assert len(ys) == 1  # horizontal


def test_emit_plot_deterministic(tmp_path):
    x = np.linspace(0, 2, 50)
    fields = {"x": x, "S": np.sin(x), "I": np.exp(x)}
    a = emit_plot(fields, tmp_path / "a.svg", title="t")
    b = emit_plot(fields, tmp_path / "b.svg", title="t")
    assert a.read_bytes() == b.read_bytes()


def test_emit_plot_rejects(tmp_path):
    with pytest.raises(ValueError):
        emit_plot({"S": np.ones(3)}, tmp_path / "x.svg")
    with pytest.raises(ValueError):
        emit_plot({"x": np.ones(3), "S": np.ones(4)}, tmp_path / "x.svg")
    with pytest.raises(OSError):
        emit_plot({"x": np.ones(3), "S": np.ones(3)}, tmp_path / "missing" / "x.svg")


# -- preset bundles ------------------------------------------------------------------

def test_fig1a_bundle(tmp_path):
    run = run_figure_preset("fig1a", out_dir=tmp_path)
    assert run.passed, [c for c in run.checks if not c.passed]
    names = [pl.find(f"{SVG}title").text for pl in _polylines(run.paths["svg"])]
    assert names == ["S", "I"]
    with open(run.paths["csv"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "S", "I", "w", "density"]
    assert len(rows) == 962
    S = np.array([float(r[1]) for r in rows[1:]])
    I = np.array([float(r[2]) for r in rows[1:]])
    assert np.max(np.abs(S - 0.5)) < 0.05
    assert abs(float(rows[1 + int(np.argmax(I))][0]) - 0.5) < 0.01  # single spike at 1/2
    rep = json.loads(run.paths["json"].read_text())
    assert set(rep) >= {"id", "model", "parameters", "solver", "limit", "checks", "passed", "runtime_s"}
    assert rep["limit"]["case_tag"] == "concentration"
    assert rep["limit"]["atoms"] == [[pytest.approx(0.5, abs=1e-6), pytest.approx(1.5)]]


def test_fig2c_no_spike_at_isolated_point():
    run = run_figure_preset("fig2c")
    assert run.passed
    g, I = run.solution.grid, run.solution.I
    assert I[g.index_of(0.375)] < 1e-6 * I.max()
    assert run.limit.measure.atoms == [(pytest.approx(0.375, abs=1e-6), 0.0)]


def test_fig6a_concentrates_at_half():
    run = run_figure_preset("fig6a")
    mw = [c for c in run.checks if c.name == "mass_window"][0]
    assert mw.passed and mw.value >= 0.8


def test_recruited_bundle_columns(tmp_path):
    run = run_figure_preset("fig4a", out_dir=tmp_path)
    assert run.passed
    header = run.paths["csv"].read_text().splitlines()[0]
    assert header == "x,S,I,density,S_hat"
    rep = json.loads(run.paths["json"].read_text())
    assert rep["limit"]["tau1"] == pytest.approx(1 - rep["limit"]["tau2"], abs=1e-10)


def test_solver_failure_flags_bundle(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericalFailure("forced")

    monkeypatch.setattr(experiments, "solve_equilibrium", boom)
    run = run_figure_preset("fig1a", out_dir=tmp_path)
    assert not run.passed
    assert "forced" in run.error
    rep = json.loads(run.paths["json"].read_text())
    assert rep["passed"] is False and "forced" in rep["error"]
    assert rep["solver"] is None


# -- sweeps ----------------------------------------------------------------------------

def test_sweep_validation():
    with pytest.raises(ValueError):
        sweep_dI("fig1a", [1e-4, 1e-3])
    with pytest.raises(ValueError):
        sweep_dI("fig1a", [1e-3, -1e-4])


def test_sweep_fig1a_monotone():
    rep = sweep_dI("fig1a", [1e-3, 1e-4, 1e-5, 1e-6])
    errs = rep.metric("s_limit_err")
    assert all(np.isfinite(errs))
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert rep.limit_case == "concentration"
    json.dumps(rep.as_dict())


def test_sweep_fig2a_interval_error_decreases():
    rep = sweep_dI("fig2a", [1e-3, 1e-4, 1e-5, 1e-6])
    errs = rep.metric("i_limit_err")
    assert all(b <= a for a, b in zip(errs, errs[1:]))


@pytest.mark.slow
def test_sweep_fig4a_violation_vanishes():
    rep = sweep_dI("fig4a", [1e-6, 1e-8, 1e-10])
    v = rep.metric("s_above_h")
    assert all(b < a for a, b in zip(v, v[1:]))
    assert v[-1] < 1e-4


def test_sweep_keeps_going_after_failure(monkeypatch):
    real = experiments.solve_equilibrium

    def flaky(coeffs, dS, dI, grid, **kw):
        if dI == 1e-4:
            raise NumericalFailure("flaky")
        return real(coeffs, dS, dI, grid, **kw)

    monkeypatch.setattr(experiments, "solve_equilibrium", flaky)
    rep = sweep_dI("fig1a", [1e-3, 1e-4, 1e-5])
    assert [r["converged"] for r in rep.rows] == [True, False, True]
    assert rep.rows[1]["error"] == "flaky"


# -- CLI ----------------------------------------------------------------------------------

def test_cli_figure_and_limit(tmp_path, capsys):
    assert cli.main(["--out-dir", str(tmp_path), "figure", "fig3a"]) == 0
    assert (tmp_path / "fig3a.svg").exists()
    assert cli.main(["--config", "fig4a", "--out-dir", str(tmp_path), "limit"]) == 0
    lim = json.loads((tmp_path / "limit.json").read_text())
    assert {"case_tag", "atoms", "tau1", "tau2", "support"} <= set(lim)
    assert lim["case_tag"] == "ii-a"
    header = (tmp_path / "limit.csv").read_text().splitlines()[0]
    assert header == "x,S_hat,density"


def test_cli_equilibrium_overrides(tmp_path):
    out = tmp_path / "eq.csv"
    rc = cli.main(["--config", "fig1a", "--grid-n", "201", "equilibrium", "--dI", "1e-3", "--output", str(out)])
    assert rc == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "x,S,I,w" and len(rows) == 202
    info = json.loads(out.with_suffix(".json").read_text())
    assert info["converged"]


def test_cli_simulate_snapshots(tmp_path):
    rc = cli.main(["--config", "fig1a", "--grid-n", "101", "--out-dir", str(tmp_path), "simulate",
                   "--dI", "1e-2", "--t-max", "5", "--snapshot-every", "1"])
    assert rc in (0, 1)
    snaps = sorted(tmp_path.glob("snapshot_*.csv"))
    assert len(snaps) >= 5
    assert snaps[0].read_text().splitlines()[0] == "x,S,I"
    summary = json.loads((tmp_path / "simulate.json").read_text())
    assert summary["mass_final"] == pytest.approx(summary["mass_initial"], rel=1e-10)


def test_cli_eigen(capsys):
    assert cli.main(["--config", "fig1a", "--grid-n", "201", "eigen", "--D", "0.5", "--weight", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["lambda1"] == pytest.approx(2.0, abs=1e-12)


def test_cli_errors(capsys):
    assert cli.main(["--config", "nope", "limit"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["limit"])
