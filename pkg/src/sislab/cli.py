"""Command line interface: ``sislab <subcommand> ...``.

A model configuration comes from ``--config``, which takes either a YAML
path or a preset id.  Per-command flags such as ``--dS`` override it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .coefficients import CONSERVED, RECRUITED, parse_coefficient
from .dynamics import default_initial_state, run_to_equilibrium, total_mass
from .equilibrium import NEWTON_TOL, NumericalFailure, principal_eigenvalue, solve_equilibrium
from .experiments import (ModelConfig, _limit_summary, eigen_weight, emit_plot, list_presets, load_config,
                          load_preset, profile_columns, run_figure_preset, sweep_dI, write_csv)
from .limits import LimitProfileA, LimitProfileB, limit_profile

log = logging.getLogger("sislab")


def _resolve_config(args) -> ModelConfig:
    if args.config is None:
        raise SystemExit("error: --config is required for this command")
    path = Path(args.config)
    cfg = load_config(path) if path.is_file() else load_preset(args.config).config
    updates = {}
    for key in ("model", "N", "Lambda", "dS", "dI"):
        val = getattr(args, key, None)
        if val is not None:
            updates[key] = val
    if "dS" in updates:
        updates["dS_critical_factor"] = None
    if args.grid_n is not None:
        updates["grid_n"] = args.grid_n
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {path}")


def _model_flags(p: argparse.ArgumentParser, dI: bool = True) -> None:
    p.add_argument("--model", choices=(CONSERVED, RECRUITED), help="override the model kind")
    p.add_argument("--N", type=float, help="total population (conserved model)")
    p.add_argument("--Lambda", type=float, help="recruitment rate (recruited model)")
    p.add_argument("--dS", type=float, help="susceptible diffusion rate")
    if dI:
        p.add_argument("--dI", type=float, help="infected diffusion rate")


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    grid, coeffs = cfg.grid(), cfg.coefficients()
    state = default_initial_state(coeffs, grid, cfg.resolved_dS(), cfg.dI, N=cfg.N)
    out = _out_dir(args)
    m0 = total_mass(state)
    snaps = []

    def snapshot(st):
        path = out / f"snapshot_{len(snaps):04d}.csv"
        write_csv({"x": grid.nodes, "S": st.S, "I": st.I}, path)
        snaps.append({"t": st.t, "path": path.name})

    snapshot(state)
    run = run_to_equilibrium(state, residual_tol=args.residual_tol, t_max=args.t_max, dt0=args.dt0,
                             callback=snapshot, snapshot_every=args.snapshot_every)
    write_csv({"x": grid.nodes, "S": run.S, "I": run.I}, out / "final.csv")
    summary = {"t": run.t, "steps": run.steps, "rejected": run.rejected, "residual": run.residual,
               "converged": run.converged, "mass_initial": m0, "mass_final": total_mass(run.state),
               "snapshots": snaps}
    _dump(summary, out / "simulate.json")
    return 0 if run.converged else 1


def cmd_equilibrium(args) -> int:
    cfg = _resolve_config(args)
    grid, coeffs = cfg.grid(), cfg.coefficients()
    try:
        sol = solve_equilibrium(coeffs, cfg.resolved_dS(), cfg.dI, grid, N=cfg.N, tol=args.tol)
    except (NumericalFailure, ValueError) as exc:
        print(f"equilibrium failed: {exc}", file=sys.stderr)
        return 2
    csv_path = Path(args.output) if args.output else _out_dir(args) / "equilibrium.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(profile_columns(sol, coeffs, None), csv_path)
    print(f"wrote {csv_path}")
    info = {"converged": bool(sol.converged), "residual_inf": float(sol.residual_inf),
            "iterations": int(sol.iterations), "endemic": bool(sol.endemic),
            "mass": None if sol.mass is None else float(sol.mass)}
    _dump(info, csv_path.with_suffix(".json"))
    return 0 if sol.converged else 1


def cmd_limit(args) -> int:
    cfg = _resolve_config(args)
    grid, coeffs = cfg.grid(), cfg.coefficients()
    prof = limit_profile(coeffs, cfg.resolved_dS(), grid, N=cfg.N)
    out = _out_dir(args)
    summary = _limit_summary(prof)
    _dump(summary, out / "limit.json")
    cols = {"x": grid.nodes}
    if isinstance(prof, LimitProfileA):
        cols["S_hat"] = np.full(grid.n, prof.S_limit)
        if prof.I_hat is not None:
            cols["I_hat"] = prof.I_hat
    elif isinstance(prof, LimitProfileB) and prof.S_hat is not None:
        cols["S_hat"] = prof.S_hat
    if prof.measure is not None:
        cols["density"] = prof.measure.density
    write_csv(cols, out / "limit.csv")
    print(f"wrote {out / 'limit.csv'}")
    return 0 if prof.supported else 1


def cmd_sweep(args) -> int:
    rep = sweep_dI(args.preset, args.dI, grid_n=args.grid_n, tol=args.tol)
    _dump(rep.as_dict(), _out_dir(args) / f"sweep_{args.preset}.json")
    return 0 if all(r.get("converged") for r in rep.rows) else 1


def cmd_figure(args) -> int:
    ids = list_presets() if args.id == "all" else [args.id]
    status = 0
    for pid in ids:
        run = run_figure_preset(pid, out_dir=args.out_dir, grid_n=args.grid_n, tol=args.tol)
        print(f"{pid}: {'PASS' if run.passed else 'FAIL'} ({run.runtime:.1f}s){' ' + run.error if run.error else ''}")
        for c in run.checks:
            print(f"  [{'ok' if c.passed else 'FAIL'}] {c.name}: {c.value:.4g} vs {c.threshold:.4g}  {c.detail}")
        status |= 0 if run.passed else 1
    return status


def cmd_eigen(args) -> int:
    cfg = _resolve_config(args)
    grid, coeffs = cfg.grid(), cfg.coefficients()
    if args.weight is not None:
        f = parse_coefficient(args.weight, L=cfg.L).on(grid)
        D = args.D if args.D is not None else cfg.dI
        label = args.weight
    else:
        sol = solve_equilibrium(coeffs, cfg.resolved_dS(), cfg.dI, grid, N=cfg.N, tol=args.tol)
        f = eigen_weight(sol, coeffs)
        D = args.D if args.D is not None else sol.dI
        label = "equilibrium loss rate minus beta*S"
    pair = principal_eigenvalue(D, f, grid)
    out = {"D": D, "weight": label, "lambda1": pair.lambda1, "residual": pair.residual, "min_weight": float(f.min())}
    print(json.dumps(out, indent=2))
    if args.plot:
        emit_plot({"x": grid.nodes, "phi": pair.phi, "f": f}, _out_dir(args) / "eigen.svg", title="principal eigenfunction")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sislab", description="Spatial SIS models: equilibria and small-dI limits.")
    parser.add_argument("--config", help="YAML model configuration or a preset id")
    parser.add_argument("--grid-n", type=int, help="number of grid nodes")
    parser.add_argument("--out-dir", default="sislab-out", help="output directory (default: %(default)s)")
    parser.add_argument("--tol", type=float, default=NEWTON_TOL, help="Newton residual tolerance")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="time-step the parabolic system and write snapshots")
    _model_flags(p)
    p.add_argument("--t-max", type=float, default=1e3)
    p.add_argument("--dt0", type=float, default=1e-3)
    p.add_argument("--snapshot-every", type=float, default=10.0)
    p.add_argument("--residual-tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("equilibrium", help="Newton solve for the endemic equilibrium")
    _model_flags(p)
    p.add_argument("--output", help="CSV path (default: OUT_DIR/equilibrium.csv)")
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("limit", help="small-dI limiting profile")
    _model_flags(p, dI=False)
    p.set_defaults(func=cmd_limit)

    p = sub.add_parser("sweep", help="equilibria along a decreasing dI sequence")
    p.add_argument("preset")
    p.add_argument("--dI", type=float, nargs="+", default=[1e-3, 1e-4, 1e-5, 1e-6, 1e-7])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("figure", help="run a figure preset and write its bundle")
    p.add_argument("id", help=f"preset id or 'all' ({', '.join(list_presets())})")
    p.set_defaults(func=cmd_figure)

    p = sub.add_parser("eigen", help="principal eigenvalue of -D u'' + f u with no-flux ends")
    _model_flags(p)
    p.add_argument("--D", type=float, help="diffusion rate (default: dI)")
    p.add_argument("--weight", help="weight f in the piecewise grammar; default uses the equilibrium")
    p.add_argument("--plot", action="store_true", help="also write eigen.svg")
    p.set_defaults(func=cmd_eigen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
