"""Run configuration and the end-to-end seeded pipeline.

Stages, each writing its artifacts before the next starts:
layout export, minimum ring, measurement before compensation, compensation
plan, measurement after compensation, crystal, spacing report, manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import os
import platform
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import io as rio
from .compensation import (
    CompensationPlan,
    LoopOptions,
    SolveOptions,
    design_wells,
    measure_sites,
    measured_site_labels,
    plan_from_estimates,
    suppression_report,
    true_tangential,
)
from .crystal import HolePerturbation, SolverOptions, site_arc, solve_crystal, spacing_report
from .fields import MinimumRing, find_minimum_ring
from .geometry import IonSpecies, RfDrive, RingLayoutParams, TrapModel, build_ring_layout
from .io import FormatError, where
from .metrology import FieldEstimate, MeasurementRecord, NoiseModel, StrayFieldModel, normalize_peak

log = logging.getLogger(__name__)

DEMO_CONFIG = Path(__file__).with_name("data") / "demo.yaml"
THREADS_ENV = "RINGTRAP_THREADS"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class HoleConfig:
    enabled: bool = True
    frequency: float = 9e3  # Hz
    width: float = 10e-6  # m


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on. ``out`` and ``workers`` do not affect
    results and are left out of the config hash."""

    layout_path: Path | None = None
    layout_params: RingLayoutParams = field(default_factory=RingLayoutParams)
    rf: RfDrive = field(default_factory=RfDrive)
    species: IonSpecies = field(default_factory=IonSpecies)
    stray_path: Path | None = None
    stray_spec: Mapping | None = None  # inline stray document
    hole: HoleConfig = field(default_factory=HoleConfig)
    sites: tuple[str, ...] = tuple(measured_site_labels())
    loop: LoopOptions = field(default_factory=LoopOptions)
    solve: SolveOptions = field(default_factory=SolveOptions)
    n_ions: int = 400
    crystal: bool = True
    crystal_max_iter: int = 200
    seed: int = 0
    out: Path = Path("out")
    workers: int = 1

    def validate_paths(self):
        for name, p in (("layout", self.layout_path), ("stray", self.stray_path)):
            if p is not None and not Path(p).is_file():
                raise FormatError(f"{name} file not found: {p}")
        out = Path(self.out)
        if out.exists() and not out.is_dir():
            raise FormatError(f"output path exists and is not a directory: {out}")

    def to_dict(self) -> dict:
        """Canonical content used for the manifest hash."""
        d: dict[str, Any] = {}
        if self.layout_path is not None:
            d["layout"] = {"file_sha256": hashlib.sha256(Path(self.layout_path).read_bytes()).hexdigest()}
        else:
            d["layout"] = {"params": rio.params_to_dict(self.layout_params)}
        d["rf"] = rio.rf_to_dict(self.rf)
        d["species"] = rio.species_to_dict(self.species)
        if self.stray_path is not None:
            d["stray"] = _plain(rio.load_yaml(self.stray_path))
        else:
            d["stray"] = _plain(self.stray_spec) if self.stray_spec is not None else None
        d["hole"] = {"enabled": self.hole.enabled, "frequency_kHz": self.hole.frequency / 1e3,
                     "width_um": self.hole.width / 1e-6}
        d["sites"] = rio.format_sites(self.sites)
        noise = self.loop.noise
        d["measurement"] = {
            "well_MHz": self.loop.well_omega_T / (2 * math.pi * 1e6),
            "alphas": list(self.loop.alphas),
            "well_vbound": self.loop.well_bound,
            "noise": None if noise is None else {"sigma_x_um": noise.sigma_x / 1e-6, "omega_rel": noise.omega_rel},
        }
        s = self.solve
        d["solver"] = {"lambda": s.lam, "vbound": s.bound, "feasibility_tol": s.feasibility_tol,
                       "fill_unmeasured": s.fill_unmeasured, "unmeasured_weight": s.unmeasured_weight,
                       "fourier_order": s.fourier_order}
        d["crystal"] = {"enabled": self.crystal, "n": self.n_ions, "max_iter": self.crystal_max_iter}
        d["seed"] = self.seed
        return d

    def config_hash(self) -> str:
        return rio.content_hash(self.to_dict())


def _plain(x):
    if isinstance(x, Mapping):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_plain(v) for v in x]
    return x


# --------------------------------------------------------------------------
# config files

_TOP = ("layout", "rf", "species", "stray", "hole", "sites", "measurement", "solver", "crystal", "seed", "out")


def config_from_dict(doc, base_dir: Path | None = None) -> RunConfig:
    base_dir = Path(base_dir or ".")
    rio._check_keys(doc, _TOP)
    kw: dict[str, Any] = {}
    if "layout" in doc:
        lay = doc["layout"]
        if isinstance(lay, str):
            kw["layout_path"] = base_dir / lay
        elif isinstance(lay, dict):
            kw["layout_params"] = rio.params_from_dict(lay)
        else:
            raise FormatError(f"{where(doc, 'layout')}: expected a file path or a parameter mapping")
    if "rf" in doc:
        kw["rf"] = rio.rf_from_dict(rio._sub(doc, "rf"))
    if "species" in doc:
        kw["species"] = rio.species_from_dict(rio._sub(doc, "species"))
    if "stray" in doc:
        st = doc["stray"]
        if isinstance(st, str):
            kw["stray_path"] = base_dir / st
        elif isinstance(st, dict):
            rio.stray_from_dict(st)  # validate early
            rnd = st.get("random")
            if rnd is not None:
                rio._check_keys(rnd, ["max_order", "n_harmonics", "peak_V_per_m"])
            kw["stray_spec"] = st
        elif st is not None:
            raise FormatError(f"{where(doc, 'stray')}: expected a file path or a stray mapping")
    if "hole" in doc:
        h = rio._sub(doc, "hole")
        rio._check_keys(h, ["enabled", "frequency_kHz", "width_um"])
        kw["hole"] = HoleConfig(bool(h.get("enabled", True)), rio._num(h, "frequency_kHz", 9.0, positive=True) * 1e3,
                                rio._num(h, "width_um", 10.0, positive=True) * 1e-6)
    if "sites" in doc:
        try:
            kw["sites"] = tuple(rio.parse_sites(doc["sites"]))
        except FormatError as exc:
            raise FormatError(f"{where(doc, 'sites')}: {exc}") from None
    if "measurement" in doc:
        m = rio._sub(doc, "measurement")
        rio._check_keys(m, ["well_MHz", "alphas", "well_vbound", "noise"])
        base = LoopOptions()
        alphas = m.get("alphas", list(base.alphas))
        if not isinstance(alphas, list) or not alphas or not all(
                isinstance(a, (int, float)) and not isinstance(a, bool) and a > 0 for a in alphas):
            raise FormatError(f"{where(m, 'alphas')}: expected a list of positive numbers")
        noise = None
        if m.get("noise") is not None:
            nz = rio._sub(m, "noise")
            rio._check_keys(nz, ["sigma_x_um", "omega_rel"])
            noise = NoiseModel(rio._num(nz, "sigma_x_um", 0.2) * 1e-6, rio._num(nz, "omega_rel", 0.01))
        kw["loop"] = dataclasses.replace(
            base,
            well_omega_T=2 * math.pi * 1e6 * rio._num(m, "well_MHz", base.well_omega_T / (2 * math.pi * 1e6),
                                                      positive=True),
            alphas=tuple(float(a) for a in alphas),
            well_bound=rio._num(m, "well_vbound", base.well_bound, positive=True),
            noise=noise,
        )
    if "solver" in doc:
        s = rio._sub(doc, "solver")
        rio._check_keys(s, ["lambda", "vbound", "feasibility_tol", "fill_unmeasured", "unmeasured_weight",
                            "fourier_order"])
        base = SolveOptions()
        lam = s.get("lambda")
        kw["solve"] = SolveOptions(
            lam=None if lam is None else rio._num(s, "lambda"),
            bound=rio._num(s, "vbound", base.bound, positive=True),
            feasibility_tol=rio._num(s, "feasibility_tol", base.feasibility_tol, positive=True),
            fill_unmeasured=bool(s.get("fill_unmeasured", base.fill_unmeasured)),
            unmeasured_weight=rio._num(s, "unmeasured_weight", base.unmeasured_weight, positive=True),
            fourier_order=rio._num(s, "fourier_order", base.fourier_order, int),
        )
    if "crystal" in doc:
        c = rio._sub(doc, "crystal")
        rio._check_keys(c, ["enabled", "n", "max_iter"])
        kw["crystal"] = bool(c.get("enabled", True))
        kw["n_ions"] = rio._num(c, "n", 400, int, positive=True)
        kw["crystal_max_iter"] = rio._num(c, "max_iter", 200, int, positive=True)
    if "seed" in doc:
        kw["seed"] = rio._num(doc, "seed", kind=int)
    if "out" in doc:
        kw["out"] = base_dir / str(doc["out"])
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    path = Path(path)
    return config_from_dict(rio.load_yaml(path), path.parent)


# --------------------------------------------------------------------------
# model and stray construction


def build_model(config: RunConfig) -> TrapModel:
    if config.layout_path is not None:
        model = rio.load_layout(config.layout_path)
        return dataclasses.replace(model, rf_drive=config.rf, species=config.species)
    return build_ring_layout(config.layout_params, config.rf, config.species)


def refine(model: TrapModel) -> tuple[TrapModel, MinimumRing]:
    ring = find_minimum_ring(model)
    return ring.apply(model), ring


def build_stray(config: RunConfig, model: TrapModel) -> StrayFieldModel:
    """Explicit stray sources plus an optional seeded random part normalised
    to its peak tangential field over the model sites."""
    if config.stray_path is not None:
        stray, rnd = rio.load_stray(config.stray_path, model.ring_radius)
    elif config.stray_spec is not None:
        stray = rio.stray_from_dict(config.stray_spec, model.ring_radius)
        rnd = config.stray_spec.get("random")
    else:
        return StrayFieldModel(ring_radius=model.ring_radius, seed=config.seed)
    stray = dataclasses.replace(stray, charge_number=model.species.charge_number)
    if rnd:
        seed = stray.seed if stray.seed is not None else config.seed
        part = StrayFieldModel.random(seed, model.ring_radius, max_order=rio._num(rnd, "max_order", 5, int),
                                      n_harmonics=rio._num(rnd, "n_harmonics", 3, int))
        part = dataclasses.replace(part, charge_number=model.species.charge_number)
        peak = rio._num(rnd, "peak_V_per_m", 500.0)
        part = normalize_peak(part, model.sites, peak)
        stray = stray + part
    return stray


def build_hole(config: RunConfig, model: TrapModel) -> HolePerturbation | None:
    if not config.hole.enabled:
        return None
    return HolePerturbation.calibrated(model.site("g00"), model.species.mass, config.hole.frequency, config.hole.width)


# --------------------------------------------------------------------------
# artifact writers

UM = 1e-6


def ring_rows(model: TrapModel, ring: MinimumRing):
    res = {round(float(a), 12): float(r) for a, r in zip(ring.azimuths, ring.residual)}
    for s in model.sites:
        x, y, z = s.position
        yield (s.label, math.degrees(s.azimuth), x / UM, y / UM, z / UM, math.hypot(x, y) / UM,
               res.get(round(float(s.azimuth), 12), math.nan))


RING_HEADER = ("site", "azimuth_deg", "x_um", "y_um", "z_um", "r_um", "E_rf_residual_V/m")


def measurement_json(records: Mapping[str, MeasurementRecord | None],
                     estimates: Mapping[str, FieldEstimate | None]) -> dict:
    out = {}
    for lab, rec in records.items():
        est = estimates.get(lab)
        if rec is None or est is None:
            out[lab] = None
            continue
        d = rec.to_dict()
        d["estimate"] = {"E_T_V/m": est.E_T, "sigma_V/m": est.sigma, "fit_residual_um": est.residual / UM}
        out[lab] = d
    return out


def field_rows(estimates: Mapping[str, FieldEstimate | None]):
    for lab, e in estimates.items():
        yield (lab, "" if e is None else e.E_T, "" if e is None else e.sigma)


FIELD_HEADER = ("site", "E_T_V/m", "sigma_V/m")


def plan_rows(plan: CompensationPlan):
    for e in plan.response.electrodes:
        yield (e, plan.delta_volts.get(e))


PLAN_HEADER = ("electrode", "delta_V")


def residual_rows(plan: CompensationPlan):
    measured = set(plan.response.sites)
    for s in sorted(plan.predicted_residual, key=lambda x: int(x[1:])):
        yield (s, s in measured, plan.predicted_residual[s])


RESIDUAL_HEADER = ("site", "measured", "predicted_residual_V/m")


def crystal_rows(positions: np.ndarray):
    for i, (x, y, z) in enumerate(positions):
        yield (i, math.degrees(math.atan2(y, x)) % 360.0, x / UM, y / UM, z / UM)


CRYSTAL_HEADER = ("index", "azimuth_deg", "x_um", "y_um", "z_um")


def read_positions(path) -> np.ndarray:
    _, rows = rio.read_csv(path)
    if not rows:
        raise FormatError(f"{path}: no positions")
    return np.column_stack([rio.column(rows, c, path) for c in ("x_um", "y_um", "z_um")]) * UM


def read_volts(path) -> dict[str, float]:
    header, rows = rio.read_csv(path)
    col = next((c for c in ("V", "delta_V") if c in header), None)
    if "electrode" not in header or col is None:
        raise FormatError(f"{path}: expected columns electrode and V (or delta_V)")
    vals = rio.column(rows, col, path)
    return {r["electrode"]: float(v) for r, v in zip(rows, vals)}


def read_fields(path) -> dict[str, FieldEstimate | None]:
    header, rows = rio.read_csv(path)
    if "site" not in header or "E_T_V/m" not in header:
        raise FormatError(f"{path}: expected columns site and E_T_V/m")
    E = rio.column(rows, "E_T_V/m", path)
    S = rio.column(rows, "sigma_V/m", path) if "sigma_V/m" in header else np.zeros(len(E))
    out = {}
    for r, e, s in zip(rows, E, S):
        out[r["site"]] = None if math.isnan(e) else FieldEstimate(float(e), 0.0 if math.isnan(s) else float(s), 0.0,
                                                                  r["site"])
    return out


def spacing_rows(rep):
    for k in range(len(rep.spacing)):
        yield (k, int(rep.order[k]), math.degrees(rep.gap_azimuth[k]), float(rep.spacing[k]))


SPACING_HEADER = ("gap", "ion", "gap_azimuth_deg", "spacing_um")


def spacing_summary(rep, excluded_arcs: Sequence[tuple[float, float]]):
    rows = [("overall", rep.overall)]
    rows += [(f"octant{i + 1}", s) for i, s in enumerate(rep.octants)]
    rows.append(("outside_excluded", rep.stats_excluding(excluded_arcs)))
    for name, s in rows:
        yield (name, s.mean, s.std, s.min, s.max, s.count, s.relative_std)


SUMMARY_HEADER = ("region", "mean_um", "std_um", "min_um", "max_um", "count", "std_over_mean")


def excluded_arcs(model: TrapModel, sites: Sequence[str]) -> list[tuple[float, float]]:
    """The loading-hole site arc plus one arc per run of unmeasured sites."""
    n = len(model.sites)
    measured = {int(s[1:]) for s in sites}
    arcs = [site_arc(model, 0)]
    k = 0
    while k < n:
        if k not in measured and k != 0:
            j = k
            while j + 1 < n and (j + 1) not in measured:
                j += 1
            arcs.append(site_arc(model, k, j))
            k = j + 1
        else:
            k += 1
    return arcs


def versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("numpy", "scipy", "shapely", "pyyaml", "artifact"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


# --------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineResult:
    status: int
    out: Path
    manifest: dict
    summary: dict = field(default_factory=dict)


def _workers(config: RunConfig) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise FormatError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return max(1, config.workers)


def run_pipeline(config: RunConfig) -> PipelineResult:
    """Seeded inject -> measure -> solve -> apply -> re-measure -> crystal run.

    Returns exit status 0 on success and 2 when a numerical stage fails; in
    that case files from earlier stages are kept and the manifest carries
    ``"status": "FAILED"`` with the failing stage.
    """
    config.validate_paths()
    workers = _workers(config)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, Any] = {
        "config": config.to_dict(),
        "config_sha256": config.config_hash(),
        "seed": config.seed,
        "versions": versions(),
        "stages": [],
    }
    summary: dict[str, Any] = {}
    state: dict[str, Any] = {}

    def stage(name: str, fn: Callable[[], Sequence[str]]):
        try:
            files = fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
        manifest["stages"].append({"stage": name, "status": "ok", "files": list(files)})
        log.info("stage %s done", name)

    def s_layout():
        state["model0"] = build_model(config)
        rio.atomic_write(out / "layout.yaml", rio.layout_text(state["model0"]))
        return ["layout.yaml"]

    def s_ring():
        model, ring = refine(state["model0"])
        state["model"], state["ring"] = model, ring
        rio.write_csv(out / "ring.csv", RING_HEADER, ring_rows(model, ring))
        summary["ring_radius_um"] = ring.mean_radius / UM
        summary["ring_height_um"] = ring.mean_height / UM
        return ["ring.csv"]

    def s_before():
        model = state["model"]
        state["stray"] = build_stray(config, model)
        state["hole"] = build_hole(config, model)
        extra = [state["hole"]] if state["hole"] is not None else []
        state["extra"] = extra
        state["wells"] = design_wells(model, config.sites, config.loop)
        recs, ests = measure_sites(model, state["wells"], state["stray"], config.sites, config.loop, None,
                                   config.seed, 0, extra, workers)
        state["before"] = ests
        rio.write_json(out / "measurements_before.json", measurement_json(recs, ests))
        rio.atomic_write(out / "stray.yaml", rio.stray_text(state["stray"]))
        return ["measurements_before.json", "stray.yaml"]

    def s_plan():
        plan = plan_from_estimates(state["model"], config.sites, state["before"], config.solve)
        state["plan"] = plan
        rio.write_csv(out / "compensation.csv", PLAN_HEADER, plan_rows(plan))
        rio.write_csv(out / "predicted_residual.csv", RESIDUAL_HEADER, residual_rows(plan))
        summary["max_abs_delta_V"] = plan.delta_volts.max_abs
        return ["compensation.csv", "predicted_residual.csv"]

    def s_after():
        model, plan = state["model"], state["plan"]
        recs, ests = measure_sites(model, state["wells"], state["stray"], config.sites, config.loop,
                                   plan.delta_volts, config.seed, 1, state["extra"], workers)
        rep = suppression_report(state["before"], ests)
        rio.write_json(out / "measurements_after.json", measurement_json(recs, ests))
        rio.atomic_write(out / "suppression.csv", rep.to_csv())
        idx = [int(s[1:]) for s in config.sites]
        tb = true_tangential(model, state["stray"])[idx]
        ta = true_tangential(model, state["stray"], plan.delta_volts)[idx]
        summary.update(
            rms_before_V_per_m=rep.rms_before, rms_after_V_per_m=rep.rms_after, suppression_ratio=rep.ratio,
            failed_after=[s for s in config.sites if ests[s] is None],
            true_rms_before_V_per_m=float(np.sqrt(np.mean(tb**2))),
            true_rms_after_V_per_m=float(np.sqrt(np.mean(ta**2))),
        )
        return ["measurements_after.json", "suppression.csv"]

    def s_crystal():
        model = state["model"]
        opts = SolverOptions(max_iter=config.crystal_max_iter)
        cr = solve_crystal(model, state["plan"].delta_volts, state["stray"], state["hole"], n=config.n_ions,
                           seed=config.seed, options=opts, ring=state["ring"])
        state["crystal"] = cr
        rio.write_csv(out / "crystal.csv", CRYSTAL_HEADER, crystal_rows(cr.positions))
        cr.require_converged()
        return ["crystal.csv"]

    def s_spacing():
        model = state["model"]
        rep = spacing_report(state["crystal"])
        arcs = excluded_arcs(model, config.sites)
        rio.write_csv(out / "spacing.csv", SPACING_HEADER, spacing_rows(rep))
        rio.write_csv(out / "spacing_summary.csv", SUMMARY_HEADER, spacing_summary(rep, arcs))
        rest = rep.stats_excluding(arcs)
        gap, gap_az = rep.largest_gap()
        summary.update(spacing_mean_um=rep.mean, spacing_rel_std_outside_excluded=rest.relative_std,
                       largest_gap_um=gap, largest_gap_azimuth_deg=math.degrees(gap_az))
        return ["spacing.csv", "spacing_summary.csv"]

    stages = [("layout", s_layout), ("minimum_ring", s_ring), ("measure_before", s_before),
              ("compensate", s_plan), ("measure_after", s_after)]
    if config.crystal:
        stages += [("crystal", s_crystal), ("spacing", s_spacing)]
    status = 0
    try:
        for name, fn in stages:
            stage(name, fn)
        manifest["status"] = "ok"
    except StageError as exc:
        log.error("%s", exc)
        manifest["status"] = "FAILED"
        manifest["failed_stage"] = exc.stage
        manifest["error"] = f"{type(exc.cause).__name__}: {exc.cause}"
        status = 2
    manifest["summary"] = summary
    rio.write_json(out / "manifest.json", manifest)
    return PipelineResult(status, out, manifest, summary)
