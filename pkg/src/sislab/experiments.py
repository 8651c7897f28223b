"""Figure presets, dI sweeps and the CSV / JSON / SVG writers.

A preset is a YAML file under ``presets/`` holding the model parameters,
coefficient strings in the piecewise grammar, the expected highest-risk set
and a list of checks with their thresholds.  ``run_figure_preset`` solves the
equilibrium, builds the small-dI limit when a closed form exists, evaluates
the checks and writes the output bundle.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np
import yaml

from .coefficients import (CONSERVED, RECRUITED, CoefficientSet, Interval, IsolatedPoint,
                           locate_minima, parse_coefficient, risk_function)
from .equilibrium import (NEWTON_TOL, EquilibriumSolution, NumericalFailure, principal_eigenvalue,
                          solve_equilibrium, w_diagnostic)
from .grid import Grid1D, build_grid, integrate, integrate_window
from .limits import LimitProfileA, LimitProfileB, critical_dS, limit_profile

logger = logging.getLogger(__name__)

_MODEL_KEYS = {"model", "L", "N", "Lambda", "dS", "dI", "grid_n", "beta", "risk", "gamma", "eta",
               "dS_critical_factor"}
_PRESET_KEYS = _MODEL_KEYS | {"id", "title", "theta", "checks", "expected_case", "fine_grid_n", "slopes"}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Model kind, coefficient strings and scalar parameters.

    Either ``risk`` (k or h) or ``gamma`` is given; with ``risk`` the
    recovery rate is built as ``risk*beta`` (minus ``eta`` with recruitment).
    ``dS_critical_factor`` replaces ``dS`` by that multiple of the critical
    dS at the right end of the domain.
    """

    model: str
    L: float
    beta: str
    risk: str | None = None
    gamma: str | None = None
    eta: str | None = None
    Lambda: float | None = None
    N: float | None = None
    dS: float | None = None
    dI: float | None = None
    grid_n: int = 961
    dS_critical_factor: float | None = None

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], allowed=_MODEL_KEYS) -> "ModelConfig":
        unknown = set(data) - set(allowed)
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        if data.get("model") not in (CONSERVED, RECRUITED):
            raise ValueError("model must be 'conserved' or 'recruited'")
        if (data.get("risk") is None) == (data.get("gamma") is None):
            raise ValueError("give exactly one of 'risk' and 'gamma'")
        kw = {k: data[k] for k in _MODEL_KEYS if k in data}
        for k in ("L", "N", "Lambda", "dS", "dI", "dS_critical_factor"):
            if kw.get(k) is not None:
                kw[k] = float(kw[k])
        for k in ("beta", "risk", "gamma", "eta"):
            if kw.get(k) is not None:
                kw[k] = str(kw[k])
        kw["grid_n"] = int(kw.get("grid_n", 961))
        return cls(**kw)

    def coefficients(self) -> CoefficientSet:
        L = self.L
        beta = parse_coefficient(self.beta, L=L)
        if self.model == CONSERVED:
            if self.risk is not None:
                return CoefficientSet.from_risk(CONSERVED, beta, parse_coefficient(self.risk, L=L))
            return CoefficientSet(beta, parse_coefficient(self.gamma, L=L), CONSERVED)
        if self.eta is None or self.Lambda is None:
            raise ValueError("the recruited model needs 'eta' and 'Lambda'")
        eta = parse_coefficient(self.eta, L=L)
        lam = parse_coefficient(repr(self.Lambda), L=L)
        if self.risk is not None:
            return CoefficientSet.from_risk(RECRUITED, beta, parse_coefficient(self.risk, L=L), eta, lam)
        return CoefficientSet(beta, parse_coefficient(self.gamma, L=L), RECRUITED, eta, lam)

    def grid(self, n: int | None = None) -> Grid1D:
        return build_grid(self.L, n or self.grid_n)

    def resolved_dS(self) -> float:
        if self.dS_critical_factor is None:
            if self.dS is None:
                raise ValueError("configuration has no dS")
            return self.dS
        if self.model != RECRUITED or self.Lambda is None:
            raise ValueError("dS_critical_factor needs the recruited model")
        d = critical_dS(risk_function(self.coefficients()), self.Lambda, self.L, "right")
        if d is None:
            raise ValueError("no critical dS: h'(L) is not negative")
        return self.dS_critical_factor * d


def load_config(path: str | Path) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    unknown = set(data) - _PRESET_KEYS  # preset files double as configurations
    if unknown:
        raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
    return ModelConfig.from_mapping({k: v for k, v in data.items() if k in _MODEL_KEYS})


@dataclass(frozen=True)
class Preset:
    id: str
    title: str
    config: ModelConfig
    theta: tuple
    checks: tuple
    expected_case: str | None = None
    fine_grid_n: int | None = None
    slopes: tuple | None = None


def _preset_dir():
    return resources.files("sislab") / "presets"


def list_presets() -> list[str]:
    return sorted(p.name[:-5] for p in _preset_dir().iterdir() if p.name.endswith(".yaml"))


def load_preset(preset_id: str) -> Preset:
    path = _preset_dir() / f"{preset_id}.yaml"
    if not path.is_file():
        raise KeyError(f"unknown preset {preset_id!r}; known: {', '.join(list_presets())}")
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    unknown = set(data) - _PRESET_KEYS
    if unknown:
        raise ValueError(f"preset {preset_id}: unknown keys {sorted(unknown)}")
    if data.get("id") != preset_id:
        raise ValueError(f"preset file {preset_id}.yaml declares id {data.get('id')!r}")
    cfg = ModelConfig.from_mapping({k: v for k, v in data.items() if k in _MODEL_KEYS})
    return Preset(
        id=preset_id,
        title=data.get("title", ""),
        config=cfg,
        theta=tuple(tuple(t) if isinstance(t, list) else float(t) for t in data.get("theta", [])),
        checks=tuple(data.get("checks", [])),
        expected_case=data.get("expected_case"),
        fine_grid_n=data.get("fine_grid_n"),
        slopes=tuple(data["slopes"]) if "slopes" in data else None,
    )


def theta_matches(preset: Preset, grid: Grid1D | None = None, tol: float = 1e-6) -> bool:
    """Whether locate_minima reproduces the preset's highest-risk set."""
    grid = grid or preset.config.grid()
    comps = locate_minima(risk_function(preset.config.coefficients()), grid).components
    if len(comps) != len(preset.theta):
        return False
    for c, t in zip(comps, preset.theta):
        if isinstance(c, IsolatedPoint):
            if isinstance(t, tuple) or abs(c.x - t) > tol:
                return False
        elif not isinstance(t, tuple) or abs(c.a - t[0]) > tol or abs(c.b - t[1]) > tol:
            return False
    return True


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": _num(self.value),
                "threshold": _num(self.threshold), "detail": self.detail}


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else str(v)


def infected_weight(sol: EquilibriumSolution, coeffs: CoefficientSet) -> np.ndarray:
    """I for the conserved model, eta*I with recruitment."""
    return sol.I if coeffs.kind == CONSERVED else coeffs.eta.on(sol.grid) * sol.I


def eigen_weight(sol: EquilibriumSolution, coeffs: CoefficientSet) -> np.ndarray:
    g = sol.grid
    f = coeffs.gamma.on(g) - coeffs.beta.on(g) * sol.S
    return f if coeffs.kind == CONSERVED else f + coeffs.eta.on(g)


def _windows_mass(grid, u, windows):
    return sum(integrate_window(grid, u, a, b) for a, b in windows)


def evaluate_check(rule: Mapping, sol: EquilibriumSolution, coeffs: CoefficientSet, limit) -> CheckResult:
    kind = rule["type"]
    g = sol.grid
    risk = risk_function(coeffs).on(g)
    mu = infected_weight(sol, coeffs)
    total = integrate(g, mu)
    if kind == "s_flat":
        v = float(np.max(np.abs(sol.S - risk.min())))
        return CheckResult(kind, v <= rule["tol"], v, rule["tol"], "max |S - k_min|")
    if kind == "mass_window":
        m = _windows_mass(g, mu, rule["windows"])
        label = f"windows {rule['windows']}"
        if "min_absolute" in rule:
            return CheckResult(kind, m >= rule["min_absolute"], m, rule["min_absolute"], label + " absolute mass")
        frac = m / total
        if "min_fraction" in rule:
            return CheckResult(kind, frac >= rule["min_fraction"], frac, rule["min_fraction"], label + " >=")
        return CheckResult(kind, frac <= rule["max_fraction"], frac, rule["max_fraction"], label + " <=")
    if kind == "mass_ratio":
        num = integrate_window(g, mu, *rule["numerator"])
        den = integrate_window(g, mu, *rule["denominator"])
        r = num / den if den > 0 else math.inf
        return CheckResult(kind, r >= rule["min_ratio"], r, rule["min_ratio"],
                           f"mass on {rule['numerator']} over mass on {rule['denominator']}")
    if kind == "eigen_identity":
        try:
            lam = principal_eigenvalue(sol.dI, eigen_weight(sol, coeffs), g).lambda1
        except NumericalFailure as exc:
            return CheckResult(kind, False, math.nan, rule["tol"], str(exc))
        return CheckResult(kind, abs(lam) <= rule["tol"], abs(lam), rule["tol"], "|lambda_1(dI, loss - beta S)|")
    if kind == "w_constant":
        wd = w_diagnostic(sol, float(risk.min()))
        return CheckResult(kind, wd.c_spread <= rule["tol"], wd.c_spread, rule["tol"],
                           "relative spread of dS*w + I")
    if kind == "i_vs_limit":
        if not isinstance(limit, LimitProfileA) or limit.I_hat is None:
            return CheckResult(kind, False, math.nan, rule["tol"], "no limit density")
        m = g.mask(*rule["interval"])
        v = float(np.max(np.abs(sol.I[m] - limit.I_hat[m])))
        return CheckResult(kind, v <= rule["tol"], v, rule["tol"], f"max |I - I_hat| on {rule['interval']}")
    if kind == "c_vs_a_hat":
        if not isinstance(limit, LimitProfileA) or limit.a_hat is None:
            return CheckResult(kind, False, math.nan, rule["tol"], "no a_hat")
        wd = w_diagnostic(sol, float(risk.min()))
        m = g.mask(*rule["interval"])
        v = float(np.max(np.abs(wd.c[m] - limit.a_hat)))
        return CheckResult(kind, v <= rule["tol"], v, rule["tol"], f"max |dS*w + I - a_hat| on {rule['interval']}")
    if kind == "s_vs_h":
        v = float(np.max(np.abs(sol.S - risk)))
        return CheckResult(kind, v <= rule["tol"], v, rule["tol"], "max |S - h|")
    if kind == "s_below_h":
        v = float(np.max(sol.S - risk))
        return CheckResult(kind, v <= rule["tol"], v, rule["tol"], "max (S - h)")
    if kind in ("s_on_touching", "mass_outside_touching"):
        if not isinstance(limit, LimitProfileB) or not limit.supported:
            return CheckResult(kind, False, math.nan, rule.get("tol", rule.get("max_fraction")), "no touching set")
        mg = rule["margin"]
        if kind == "s_on_touching":
            mask = np.zeros(g.n, dtype=bool)
            for a, b in limit.touching_set:
                lo = a + mg if a > 0 else a
                hi = b - mg if b < g.length else b - mg
                if hi > lo:
                    mask |= g.mask(lo, hi)
            v = float(np.max(np.abs(sol.S - risk)[mask])) if mask.any() else math.nan
            return CheckResult(kind, v <= rule["tol"], v, rule["tol"], "max |S - h| inside the touching set")
        inside = sum(integrate_window(g, mu, a - mg, b + mg) for a, b in limit.touching_set)
        frac = (total - inside) / total
        return CheckResult(kind, frac <= rule["max_fraction"], frac, rule["max_fraction"],
                           "infected mass fraction away from the touching set")
    if kind == "limit_mass":
        if not isinstance(limit, LimitProfileB) or not limit.supported:
            return CheckResult(kind, False, math.nan, rule["rel_tol"], "no limit measure")
        eta = coeffs.eta
        pred = sum(float(eta(x)) * m for x, m in limit.measure.atoms) + integrate(g, eta.on(g) * limit.measure.density)
        v = abs(total - pred) / pred
        return CheckResult(kind, v <= rule["rel_tol"], v, rule["rel_tol"], "relative gap to the limit mass")
    raise ValueError(f"unknown check type {kind!r}")


# ---------------------------------------------------------------------------
# preset runs
# ---------------------------------------------------------------------------

@dataclass
class PresetRun:
    preset: Preset
    solution: EquilibriumSolution | None
    limit: LimitProfileA | LimitProfileB | None
    checks: list[CheckResult]
    passed: bool
    runtime: float
    dS: float
    error: str = ""
    paths: dict = field(default_factory=dict)


def _limit_for(cfg: ModelConfig, coeffs, dS, grid, sol):
    try:
        if cfg.model == CONSERVED:
            return limit_profile(coeffs, dS, grid, N=cfg.N,
                                 observed_I=sol.I if sol is not None and sol.converged else None)
        return limit_profile(coeffs, dS, grid)
    except (NumericalFailure, ValueError) as exc:
        logger.warning("limit profile failed: %s", exc)
        return None


def run_figure_preset(preset_id: str, out_dir: str | Path | None = None, grid_n: int | None = None,
                      tol: float = NEWTON_TOL) -> PresetRun:
    """Solve one preset, evaluate its checks and (with ``out_dir``) write CSV, JSON and SVG."""
    preset = load_preset(preset_id)
    cfg = preset.config
    grid = cfg.grid(grid_n)
    coeffs = cfg.coefficients()
    dS = cfg.resolved_dS()
    t0 = time.perf_counter()
    sol, error = None, ""
    try:
        sol = solve_equilibrium(coeffs, dS, cfg.dI, grid, N=cfg.N, tol=tol)
        if not sol.converged:
            error = f"equilibrium solver did not converge (residual {sol.residual_inf:.3g})"
    except (NumericalFailure, ValueError) as exc:
        error = f"equilibrium solver failed: {exc}"
    limit = _limit_for(cfg, coeffs, dS, grid, sol)
    checks = []
    if sol is not None and sol.converged:
        checks = [evaluate_check(rule, sol, coeffs, limit) for rule in preset.checks]
    if preset.expected_case is not None and isinstance(limit, LimitProfileB):
        ok = limit.case_tag == preset.expected_case
        checks.append(CheckResult("case_routing", ok, math.nan, math.nan,
                                  f"routed to {limit.case_tag}, expected {preset.expected_case}"))
    runtime = time.perf_counter() - t0
    passed = not error and all(c.passed for c in checks)
    run = PresetRun(preset, sol, limit, checks, passed, runtime, dS, error)
    if out_dir is not None:
        run.paths = write_bundle(run, Path(out_dir), tol)
    return run


def _limit_summary(limit) -> dict:
    if limit is None:
        return {"case_tag": None, "supported": False}
    out = {"case_tag": limit.case_tag, "supported": bool(limit.supported), "message": limit.message}
    meas = limit.measure
    if meas is not None:
        out["atoms"] = [[_num(x), _num(m)] for x, m in meas.atoms]
        out["atom_status"] = meas.atom_status
        out["support"] = [[s[0], *[_num(v) for v in s[1:]]] for s in meas.support]
    if isinstance(limit, LimitProfileA):
        out["S_limit"] = _num(limit.S_limit)
        out["a_hat"] = None if limit.a_hat is None else _num(limit.a_hat)
        out["tau1"] = out["tau2"] = None
    else:
        out["tau1"] = None if limit.tau1 is None else _num(limit.tau1)
        out["tau2"] = None if limit.tau2 is None else _num(limit.tau2)
        out["touching_set"] = [[_num(a), _num(b)] for a, b in limit.touching_set]
        out["checks"] = {k: (_num(v) if not isinstance(v, bool) else v) for k, v in limit.checks.items()}
    return out


def profile_columns(sol: EquilibriumSolution, coeffs: CoefficientSet, limit) -> dict[str, np.ndarray]:
    cols = {"x": sol.grid.nodes, "S": sol.S, "I": sol.I}
    if coeffs.kind == CONSERVED:
        kmin = float(risk_function(coeffs).on(sol.grid).min())
        cols["w"] = w_diagnostic(sol, kmin).w
    if limit is not None and limit.measure is not None:
        cols["density"] = limit.measure.density
    if isinstance(limit, LimitProfileB) and limit.S_hat is not None:
        cols["S_hat"] = limit.S_hat
    return cols


def write_csv(columns: Mapping[str, np.ndarray], path: Path) -> None:
    names = list(columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(names)
        for row in zip(*(columns[k] for k in names)):
            wr.writerow([repr(float(v)) for v in row])


def write_bundle(run: PresetRun, out_dir: Path, tol: float) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    pid = run.preset.id
    cfg = run.preset.config
    paths = {}
    coeffs = cfg.coefficients()
    if run.solution is not None:
        cols = profile_columns(run.solution, coeffs, run.limit)
        paths["csv"] = out_dir / f"{pid}.csv"
        write_csv(cols, paths["csv"])
        plot = {"x": cols["x"], "S": cols["S"], "I": cols["I"]}
        if cfg.model == RECRUITED:
            plot["h"] = risk_function(coeffs).on(run.solution.grid)
        paths["svg"] = out_dir / f"{pid}.svg"
        emit_plot(plot, paths["svg"], title=f"{pid}: {run.preset.title}")
    sol = run.solution
    report = {
        "id": pid,
        "title": run.preset.title,
        "model": cfg.model,
        "parameters": {"L": cfg.L, "N": cfg.N, "Lambda": cfg.Lambda, "dS": run.dS, "dI": cfg.dI,
                       "grid_n": None if sol is None else sol.grid.n, "tol": tol},
        "solver": None if sol is None else {
            "converged": bool(sol.converged), "residual_inf": _num(sol.residual_inf),
            "iterations": int(sol.iterations),
            "mass": None if sol.mass is None else _num(sol.mass),
            "path": [[_num(d) if isinstance(d, (int, float)) else d, c, i] for d, c, i in sol.meta.get("path", [])],
        },
        "runtime_s": round(run.runtime, 3),
        "error": run.error,
        "limit": _limit_summary(run.limit),
        "checks": [c.as_dict() for c in run.checks],
        "passed": bool(run.passed),
    }
    paths["json"] = out_dir / f"{pid}.json"
    paths["json"].write_text(json.dumps(report, indent=2, default=_json_default) + "\n", encoding="utf-8")
    return paths


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return _num(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepReport:
    preset_id: str
    dI_values: list[float]
    rows: list[dict]
    limit_case: str | None
    window_half_width: float
    total_runtime: float

    def metric(self, name: str) -> list[float]:
        return [r.get(name, math.nan) for r in self.rows]

    def as_dict(self) -> dict:
        return {"preset": self.preset_id, "dI": self.dI_values, "limit_case": self.limit_case,
                "window_half_width": self.window_half_width, "total_runtime_s": round(self.total_runtime, 3),
                "rows": [{k: (_num(v) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()}
                         for r in self.rows]}


def _sweep_row(sol, coeffs, limit, grid, analysis, hw):
    g = grid
    risk = risk_function(coeffs).on(g)
    mu = infected_weight(sol, coeffs)
    total = integrate(g, mu)
    row = {"dI": sol.dI, "converged": bool(sol.converged), "residual_inf": float(sol.residual_inf)}
    if coeffs.kind == CONSERVED:
        row["s_limit_err"] = float(np.max(np.abs(sol.S - analysis.min_value)))
    else:
        row["s_above_h"] = float(np.max(sol.S - risk))
        ok = isinstance(limit, LimitProfileB) and limit.supported
        row["s_limit_err"] = float(np.max(np.abs(sol.S - limit.S_hat))) if ok else math.nan
    fracs = []
    for c in analysis.components:
        a, b = (c.x, c.x) if isinstance(c, IsolatedPoint) else (c.a, c.b)
        fracs.append(integrate_window(g, mu, a - hw, b + hw) / total)
    row["window_fractions"] = fracs
    if isinstance(limit, LimitProfileA) and limit.I_hat is not None:
        errs = []
        for a, b in analysis.intervals:
            lo, hi = (a + 0.05 if a > 0 else a), (b - 0.05 if b < g.length else b)
            if hi > lo:
                m = g.mask(lo, hi)
                errs.append(float(np.max(np.abs(sol.I[m] - limit.I_hat[m]))))
        row["i_limit_err"] = max(errs) if errs else math.nan
    try:
        row["lambda1"] = abs(principal_eigenvalue(sol.dI, eigen_weight(sol, coeffs), g).lambda1)
    except NumericalFailure:
        row["lambda1"] = math.nan
    return row


def sweep_dI(preset_id: str, dI_values: Sequence[float], grid_n: int | None = None,
             tol: float = NEWTON_TOL) -> SweepReport:
    """Equilibria along a decreasing dI sequence, each seeded by the previous one."""
    vals = [float(v) for v in dI_values]
    if not vals or any(v <= 0 for v in vals) or any(b >= a for a, b in zip(vals, vals[1:])):
        raise ValueError("dI values must be positive and strictly decreasing")
    preset = load_preset(preset_id)
    cfg = preset.config
    grid = cfg.grid(grid_n)
    coeffs = cfg.coefficients()
    dS = cfg.resolved_dS()
    analysis = locate_minima(risk_function(coeffs), grid)
    hw = max(10 * grid.h, 0.01 * grid.length)
    t_all = time.perf_counter()
    limit = _limit_for(cfg, coeffs, dS, grid, None)
    rows, prev = [], None
    for dI in vals:
        t0 = time.perf_counter()
        try:
            sol = None
            if prev is not None:
                sol = solve_equilibrium(coeffs, dS, dI, grid, N=cfg.N, tol=tol, init=(prev.S, prev.I))
            if sol is None or not sol.converged:
                sol = solve_equilibrium(coeffs, dS, dI, grid, N=cfg.N, tol=tol)
            row = _sweep_row(sol, coeffs, limit, grid, analysis, hw)
            if sol.converged:
                prev = sol
        except (NumericalFailure, ValueError) as exc:
            row = {"dI": dI, "converged": False, "error": str(exc)}
        row["runtime_s"] = time.perf_counter() - t0
        rows.append(row)
    return SweepReport(preset_id, vals, rows, None if limit is None else limit.case_tag, hw,
                       time.perf_counter() - t_all)


# ---------------------------------------------------------------------------
# SVG output
# ---------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def emit_plot(fields: Mapping[str, Sequence[float]], path: str | Path, title: str = "",
              x_label: str = "x") -> Path:
    """Write stacked line panels (one polyline per field, shared x axis) as SVG.

    ``fields`` must contain ``"x"``; every other entry is drawn in its own
    panel with its own y range.  Output bytes depend only on the input.
    """
    if "x" not in fields:
        raise ValueError("fields need an 'x' entry")
    x = np.asarray(fields["x"], dtype=float)
    names = [k for k in fields if k != "x"]
    for k in names:
        if np.asarray(fields[k]).shape != x.shape:
            raise ValueError(f"field {k!r} is not on the common grid")
    W, ph, top, left, right, gap = 640, 160, 40, 70, 20, 30
    H = top + len(names) * (ph + gap) + 30
    xmin, xmax = float(x.min()), float(x.max())
    sx = (W - left - right) / (xmax - xmin if xmax > xmin else 1.0)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W // 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for k, name in enumerate(names):
        y = np.asarray(fields[name], dtype=float)
        finite = np.isfinite(y)
        lo, hi = (float(y[finite].min()), float(y[finite].max())) if finite.any() else (0.0, 1.0)
        if hi - lo < 1e-12 * max(1.0, abs(hi)):
            lo, hi = lo - 0.5, hi + 0.5
        y0 = top + k * (ph + gap)
        sy = ph / (hi - lo)
        color = _COLORS[k % len(_COLORS)]
        out.append(f'<rect x="{left}" y="{y0}" width="{W - left - right}" height="{ph}" '
                   f'fill="none" stroke="#888"/>')
        for t in _ticks(lo, hi):
            py = y0 + ph - (t - lo) * sy
            out.append(f'<text x="{left - 5}" y="{_fmt(py + 4)}" text-anchor="end">{t:.4g}</text>')
        pts = " ".join(f"{_fmt(left + (xi - xmin) * sx)},{_fmt(y0 + ph - (yi - lo) * sy)}"
                       for xi, yi in zip(x[finite], y[finite]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
                   f'<title>{escape(name)}</title></polyline>')
        # legend entry
        out.append(f'<line x1="{W - right - 60}" y1="{y0 + 12}" x2="{W - right - 40}" y2="{y0 + 12}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - right - 35}" y="{y0 + 16}">{escape(name)}</text>')
    base = top + len(names) * (ph + gap) - gap
    for t in _ticks(xmin, xmax):
        px = left + (t - xmin) * sx
        out.append(f'<text x="{_fmt(px)}" y="{base + 14}" text-anchor="middle">{t:.4g}</text>')
    out.append(f'<text x="{(W + left) // 2}" y="{base + 28}" text-anchor="middle">{escape(x_label)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path
