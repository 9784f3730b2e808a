"""Command-line front end.

Every subcommand reads an optional ``--config`` YAML file first; flags
given on the command line override it. Exit codes: 0 success, 1 usage or
input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io as rio
from .compensation import (
    CompensationError,
    LoopOptions,
    ResponseMatrix,
    design_wells,
    measure_sites,
    response_matrix,
    solve_compensation,
    suppression_report,
)
from .crystal import CrystalError, SolverOptions, solve_crystal, spacing_from_positions, spacing_report
from .fields import (
    ConvergenceError,
    FieldError,
    SaddlePointError,
    VoltageSet,
    e_field,
    potential,
    rf_pseudopotential,
    secular_modes,
    trap_depth,
)
from .geometry import LayoutError, validate
from .io import FormatError
from .metrology import MeasurementError
from .pipeline import (
    CRYSTAL_HEADER,
    DEMO_CONFIG,
    FIELD_HEADER,
    PLAN_HEADER,
    RESIDUAL_HEADER,
    SPACING_HEADER,
    SUMMARY_HEADER,
    RunConfig,
    build_hole,
    build_model,
    build_stray,
    crystal_rows,
    excluded_arcs,
    field_rows,
    load_config,
    measurement_json,
    plan_rows,
    read_fields,
    read_positions,
    read_volts,
    refine,
    residual_rows,
    run_pipeline,
    spacing_rows,
    spacing_summary,
)

log = logging.getLogger("ringtrap")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
NUMERIC_ERRORS = (ConvergenceError, SaddlePointError, CrystalError, CompensationError, MeasurementError,
                  np.linalg.LinAlgError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# configuration: file first, flags on top


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--layout", type=Path, help="layout file (YAML, um / deg)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--rf-volts", type=float, dest="rf_volts", help="rf amplitude, V")
    p.add_argument("--rf-mhz", type=float, dest="rf_mhz", help="rf drive frequency, MHz")
    p.add_argument("-v", "--verbose", action="store_true")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    kw = {}
    if getattr(args, "layout", None):
        kw["layout_path"] = args.layout
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "out", None):
        kw["out"] = args.out
    if getattr(args, "rf_volts", None) is not None or getattr(args, "rf_mhz", None) is not None:
        rf = cfg.rf
        amp = rf.amplitude if args.rf_volts is None else args.rf_volts
        om = rf.omega if args.rf_mhz is None else 2 * math.pi * 1e6 * args.rf_mhz
        kw["rf"] = type(rf)(amp, om)
    if getattr(args, "sites", None):
        kw["sites"] = tuple(rio.parse_sites(args.sites))
    if getattr(args, "n", None) is not None:
        if args.n < 1:
            raise UsageError("--n must be >= 1")
        kw["n_ions"] = args.n
    if getattr(args, "stray", None):
        kw["stray_path"] = args.stray
        kw["stray_spec"] = None
    lam = getattr(args, "lam", None)
    vb = getattr(args, "vbound", None)
    if lam is not None or vb is not None:
        s = cfg.solve
        kw["solve"] = dataclasses.replace(s, lam=s.lam if lam is None else lam, bound=s.bound if vb is None else vb)
    cfg = dataclasses.replace(cfg, **kw)
    cfg.validate_paths()
    return cfg


def _model(cfg: RunConfig):
    model, ring = refine(build_model(cfg))
    return model, ring


def _volts(path) -> VoltageSet:
    return VoltageSet(read_volts(path)) if path else VoltageSet({})


def _grid(text: str, name: str) -> np.ndarray:
    """``"a"`` or ``"start:stop:n"`` in um."""
    try:
        parts = [float(x) for x in text.split(":")]
    except ValueError:
        raise UsageError(f"--{name}: expected VALUE or START:STOP:N in um, got {text!r}") from None
    if len(parts) == 1:
        return np.array(parts) * 1e-6
    if len(parts) != 3 or parts[2] < 1 or parts[2] != int(parts[2]):
        raise UsageError(f"--{name}: expected START:STOP:N in um, got {text!r}")
    return np.linspace(parts[0], parts[1], int(parts[2])) * 1e-6


# --------------------------------------------------------------------------
# subcommands


def cmd_layout(args) -> int:
    cfg = _resolve(args)
    model = build_model(cfg)
    rep = validate(model)
    if args.action == "validate":
        for p in rep.problems():
            print(p)
        print("clean" if rep.clean else f"{len(rep.problems())} problems")
        return EXIT_OK if rep.clean else EXIT_NUMERIC
    path = rio.atomic_write(Path(cfg.out) / "layout.yaml", rio.layout_text(model))
    print(f"{len(model.electrodes)} electrodes, {len(model.usable_control_ids)} usable controls, "
          f"shorted {','.join(model.shorted_ids)} -> {path}")
    return EXIT_OK


def cmd_field_map(args) -> int:
    cfg = _resolve(args)
    model, _ = _model(cfg)
    volts = _volts(args.volts)
    xs, ys, zs = _grid(args.x, "x"), _grid(args.y, "y"), _grid(args.z, "z")
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    P = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    if np.any(P[:, 2] <= 0):
        raise UsageError("field map points must lie above the electrode plane (z > 0)")
    phi = np.atleast_1d(potential(model, volts, P)) if volts else np.zeros(len(P))
    E = e_field(model, volts, P) if volts else np.zeros((len(P), 3))
    pp = np.atleast_1d(rf_pseudopotential(model, P))
    rows = ((p[0] / 1e-6, p[1] / 1e-6, p[2] / 1e-6, f, e[0], e[1], e[2], u) for p, f, e, u in zip(P, phi, E, pp))
    path = rio.write_csv(Path(cfg.out) / "field_map.csv",
                         ("x_um", "y_um", "z_um", "phi_V", "Ex_V/m", "Ey_V/m", "Ez_V/m", "pseudo_eV"), rows)
    print(f"{len(P)} points -> {path}")
    return EXIT_OK


def cmd_modes(args) -> int:
    cfg = _resolve(args)
    model, _ = _model(cfg)
    volts = _volts(args.volts)
    labels = rio.parse_sites(args.site)
    rows = []
    for lab in labels:
        m = secular_modes(model, volts, model.site(lab))
        t, r, z = m.mhz
        depth = trap_depth(model, volts, model.site(lab)) * 1e3 if args.depth else math.nan
        rows.append((lab, t, r, z, math.degrees(m.rotation), depth))
        print(f"{lab}: omega_T {t:.4f} MHz  omega_R {r:.4f} MHz  omega_Z {z:.4f} MHz  "
              f"rotation {math.degrees(m.rotation):.2f} deg" + (f"  depth {depth:.2f} meV" if args.depth else ""))
    rio.write_csv(Path(cfg.out) / "modes.csv",
                  ("site", "omega_T_MHz", "omega_R_MHz", "omega_Z_MHz", "rotation_deg", "depth_meV"), rows)
    return EXIT_OK


def cmd_crystal(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out)
    if args.action == "report":
        if not args.positions:
            raise UsageError("crystal report needs --positions")
        pos = read_positions(args.positions)
        rep = spacing_from_positions(pos)
        arcs = []
    else:
        model, ring = _model(cfg)
        stray = build_stray(cfg, model)
        hole = build_hole(cfg, model) if args.hole else None
        cr = solve_crystal(model, _volts(args.volts), stray, hole, n=cfg.n_ions, seed=cfg.seed,
                           options=SolverOptions(max_iter=cfg.crystal_max_iter), ring=ring)
        rio.write_csv(out / "crystal.csv", CRYSTAL_HEADER, crystal_rows(cr.positions))
        rep = spacing_report(cr)
        arcs = excluded_arcs(model, cfg.sites)
        print(f"{cr.n} ions, {cr.iterations} iterations, max force {cr.max_force:.3g} eV/m")
    rio.write_csv(out / "spacing.csv", SPACING_HEADER, spacing_rows(rep))
    rio.write_csv(out / "spacing_summary.csv", SUMMARY_HEADER, spacing_summary(rep, arcs))
    gap, az = rep.largest_gap()
    print(f"mean spacing {rep.mean:.4f} um, std/mean {rep.overall.relative_std:.3e}, "
          f"largest gap {gap:.2f} um at {math.degrees(az):.2f} deg")
    return EXIT_OK


def cmd_measure(args) -> int:
    cfg = _resolve(args)
    model, _ = _model(cfg)
    stray = build_stray(cfg, model)
    hole = build_hole(cfg, model)
    extra = [hole] if hole is not None else []
    wells = design_wells(model, cfg.sites, cfg.loop)
    recs, ests = measure_sites(model, wells, stray, cfg.sites, cfg.loop, _volts(args.volts), cfg.seed, 0, extra)
    out = Path(cfg.out)
    rio.write_json(out / "measurements.json", measurement_json(recs, ests))
    rio.write_csv(out / "fields.csv", FIELD_HEADER, field_rows(ests))
    ok = sum(e is not None for e in ests.values())
    print(f"{ok}/{len(ests)} sites measured -> {out / 'fields.csv'}")
    return EXIT_OK if ok == len(ests) else EXIT_NUMERIC


def cmd_response(args) -> int:
    cfg = _resolve(args)
    model, _ = _model(cfg)
    resp = response_matrix(model, [s.label for s in model.sites])
    path = rio.atomic_write(Path(cfg.out) / "response.csv", resp.to_csv())
    print(f"{len(resp.sites)} x {len(resp.electrodes)} response matrix -> {path}")
    return EXIT_OK


def cmd_compensate(args) -> int:
    cfg = _resolve(args)
    measured = read_fields(args.measured)
    if args.response:
        full = ResponseMatrix.from_csv(Path(args.response).read_text())
    else:
        model, _ = _model(cfg)
        full = response_matrix(model, [s.label for s in model.sites])
    unknown = [s for s in measured if s not in full.sites]
    if unknown:
        raise UsageError(f"measured sites missing from the response matrix: {', '.join(unknown)}")
    ok = [s for s, e in measured.items() if e is not None]
    plan = solve_compensation(full.rows(ok), [measured[s] for s in ok], cfg.solve, all_sites=full)
    out = Path(cfg.out)
    rio.write_csv(out / "compensation.csv", PLAN_HEADER, plan_rows(plan))
    rio.write_csv(out / "predicted_residual.csv", RESIDUAL_HEADER, residual_rows(plan))
    from .metrology import FieldEstimate

    predicted = {s: FieldEstimate(plan.predicted_residual[s], 0.0, 0.0, s) for s in ok}
    rep = suppression_report({s: measured[s] for s in ok}, predicted)
    rio.atomic_write(out / "suppression_predicted.csv", rep.to_csv())
    print(f"max |dV| {plan.delta_volts.max_abs:.4g} V, predicted rms {rep.rms_before:.4g} -> "
          f"{rep.rms_after:.4g} V/m" + (" (bounded)" if plan.bounded else ""))
    return EXIT_OK


def cmd_loop(args) -> int:
    if args.demo and args.config:
        raise UsageError("--demo and --config are exclusive")
    if args.demo:
        args.config = DEMO_CONFIG
    cfg = _resolve(args)
    res = run_pipeline(cfg)
    s = res.summary
    if "suppression_ratio" in s:
        print(f"measured rms {s['rms_before_V_per_m']:.4g} -> {s['rms_after_V_per_m']:.4g} V/m "
              f"(ratio {s['suppression_ratio']:.4g}); at the sites {s['true_rms_before_V_per_m']:.4g} -> "
              f"{s['true_rms_after_V_per_m']:.4g} V/m")
    if "spacing_mean_um" in s:
        print(f"crystal: mean spacing {s['spacing_mean_um']:.4f} um, std/mean outside excluded arcs "
              f"{s['spacing_rel_std_outside_excluded']:.4f}, largest gap {s['largest_gap_um']:.2f} um at "
              f"{s['largest_gap_azimuth_deg']:.2f} deg")
    print(f"manifest: {res.out / 'manifest.json'} ({res.manifest['status']})")
    return res.status


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ringtrap", description="Ring surface-trap simulation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("layout", help="export or validate the electrode layout")
    q.add_argument("action", choices=("export", "validate"))
    _common(q)
    q.set_defaults(func=cmd_layout)

    q = sub.add_parser("field", help="field map over a grid")
    q.add_argument("action", choices=("map",))
    _common(q)
    q.add_argument("--volts", type=Path, help="CSV electrode,V (dc voltages)")
    q.add_argument("--x", default="-100:100:5", help="um: VALUE or START:STOP:N")
    q.add_argument("--y", default="625", help="um")
    q.add_argument("--z", default="40:140:11", help="um")
    q.set_defaults(func=cmd_field_map)

    q = sub.add_parser("modes", help="secular frequencies at sites")
    _common(q)
    q.add_argument("--site", default="g25", help="site or range, e.g. g25 or g00..g03")
    q.add_argument("--volts", type=Path)
    q.add_argument("--depth", action="store_true", help="also compute the trap depth (slow)")
    q.set_defaults(func=cmd_modes)

    q = sub.add_parser("crystal", help="solve a ring crystal or report spacing statistics")
    q.add_argument("action", choices=("solve", "report"))
    _common(q)
    q.add_argument("--n", type=int)
    q.add_argument("--volts", type=Path)
    q.add_argument("--stray", type=Path, help="stray spec YAML")
    q.add_argument("--sites", help="measured sites; the others define excluded arcs")
    q.add_argument("--hole", action="store_true", help="include the loading-hole bump")
    q.add_argument("--positions", type=Path, help="positions CSV for 'report'")
    q.set_defaults(func=cmd_crystal)

    q = sub.add_parser("measure", help="virtual field measurement at sites")
    _common(q)
    q.add_argument("--sites")
    q.add_argument("--stray", type=Path)
    q.add_argument("--volts", type=Path, help="voltages held fixed during the scans")
    q.set_defaults(func=cmd_measure)

    q = sub.add_parser("response", help="write the tangential response matrix for all sites")
    _common(q)
    q.set_defaults(func=cmd_response)

    q = sub.add_parser("compensate", help="solve for compensation voltages")
    _common(q)
    q.add_argument("--measured", type=Path, required=True, help="CSV site,E_T_V/m[,sigma_V/m]")
    q.add_argument("--response", type=Path, help="response matrix CSV (default: computed)")
    q.add_argument("--lambda", type=float, dest="lam")
    q.add_argument("--vbound", type=float)
    q.set_defaults(func=cmd_compensate)

    q = sub.add_parser("loop", help="full seeded inject/measure/solve/verify run")
    _common(q)
    q.add_argument("--demo", action="store_true", help="use the bundled demo configuration")
    q.add_argument("--sites")
    q.add_argument("--n", type=int)
    q.add_argument("--stray", type=Path)
    q.add_argument("--lambda", type=float, dest="lam")
    q.add_argument("--vbound", type=float)
    q.set_defaults(func=cmd_loop)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FormatError, LayoutError, FieldError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
