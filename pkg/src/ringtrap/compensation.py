"""Tangential response matrix, simultaneous field cancellation and local well design."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import constants as ct
from scipy.optimize import lsq_linear

from . import _kernels
from .fields import TrapPotential, VoltageSet, secular_modes
from .geometry import RingSite, TrapModel
from .metrology import FieldEstimate, NoiseModel

log = logging.getLogger(__name__)

DEFAULT_BOUND = 10.0  # V
RATIO_CAP = 1e12  # reported when the post-compensation rms is exactly zero
# (omega_Z^2 - omega_R^2) / (omega_Z^2 + omega_R^2) for 2.17 and 2.12 MHz
REFERENCE_SPLIT = (2.17**2 - 2.12**2) / (2.17**2 + 2.12**2)


class CompensationError(RuntimeError):
    pass


def measured_site_labels(n_sites: int = 44, excluded: Sequence[int] = range(20, 25)) -> list[str]:
    return [f"g{k:02d}" for k in range(n_sites) if k not in set(excluded)]


# --------------------------------------------------------------------------
# response matrix


def unit_fields(model: TrapModel, electrodes: Sequence[str], points: np.ndarray) -> np.ndarray:
    """Field per volt, shape (n_points, n_electrodes, 3)."""
    table = model.edge_table
    out = np.empty((len(points), len(electrodes), 3))
    for j, eid in enumerate(electrodes):
        v = np.zeros(len(table.owners))
        v[table.index(eid)] = 1.0
        A, B, w, _ = table.select(v)
        out[:, j] = _kernels.field(points, A, B, w)
    return out


@dataclass(frozen=True)
class ResponseMatrix:
    """Tangential field (V/m) at each site per volt on each electrode."""

    sites: tuple[str, ...]
    electrodes: tuple[str, ...]
    entries: np.ndarray

    def __post_init__(self):
        if self.entries.shape != (len(self.sites), len(self.electrodes)):
            raise ValueError("response matrix shape does not match its labels")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("non-finite response entries")

    def field(self, volts: Mapping[str, float]) -> np.ndarray:
        return self.entries @ VoltageSet(volts).vector(self.electrodes)

    def rows(self, labels: Sequence[str]) -> "ResponseMatrix":
        idx = [self.sites.index(s) for s in labels]
        return ResponseMatrix(tuple(labels), self.electrodes, self.entries[idx])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site"] + [f"{e}_V/m_per_V" for e in self.electrodes])
        for s, row in zip(self.sites, self.entries):
            w.writerow([s] + [repr(float(x)) for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResponseMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "site":
            raise ValueError("response CSV must start with a 'site' header")
        els = tuple(h.split("_", 1)[0] for h in rows[0][1:])
        sites = tuple(r[0] for r in rows[1:])
        data = np.array([[float(x) for x in r[1:]] for r in rows[1:]], float).reshape(len(sites), len(els))
        return cls(sites, els, data)


def response_matrix(model: TrapModel, sites: Sequence[str] | None = None,
                    electrodes: Sequence[str] | None = None) -> ResponseMatrix:
    """Entry (i, j) = T_i . E(unit volt on electrode j) at site i."""
    sites = measured_site_labels(len(model.sites)) if sites is None else list(sites)
    electrodes = model.usable_control_ids if electrodes is None else list(electrodes)
    for e in electrodes:
        if model.electrode(e).shorted:
            raise CompensationError(f"electrode {e} is shorted and cannot be driven")
    ss = [model.site(s) for s in sites]
    pts = np.array([s.position for s in ss])
    E = unit_fields(model, electrodes, pts)
    T = np.array([s.t_hat for s in ss])
    return ResponseMatrix(tuple(sites), tuple(electrodes), np.einsum("ijk,ik->ij", E, T))


# --------------------------------------------------------------------------
# solve


@dataclass(frozen=True)
class SolveOptions:
    lam: float | None = None  # ridge weight; None -> 1e-6 * sigma_max^2
    bound: float = DEFAULT_BOUND
    feasibility_tol: float = 0.01  # bounded fits leaving more than this rms fraction are infeasible
    # unmeasured sites get target fields from a Fourier fit of the measured
    # ones and join the solve as extra equations; False solves measured rows only
    fill_unmeasured: bool = True
    fourier_order: int = 8
    unmeasured_weight: float = 3.0  # row weight of the filled equations


@dataclass(frozen=True)
class CompensationPlan:
    response: ResponseMatrix
    measured: tuple[FieldEstimate, ...]
    delta_volts: VoltageSet
    predicted_residual: dict[str, float]
    options: SolveOptions
    lam: float
    bounded: bool = False

    def measured_residual(self) -> np.ndarray:
        return np.array([self.predicted_residual[s] for s in self.response.sites])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["electrode", "delta_V"])
        for e in self.response.electrodes:
            w.writerow([e, repr(self.delta_volts.get(e))])
        return buf.getvalue()


def _as_estimates(measured, sites) -> tuple[FieldEstimate, ...]:
    out = []
    for i, m in enumerate(measured):
        if isinstance(m, FieldEstimate):
            out.append(m)
        else:
            out.append(FieldEstimate(float(m), 0.0, 0.0, sites[i]))
    return tuple(out)


def solve_compensation(response: ResponseMatrix, measured, options: SolveOptions = SolveOptions(),
                       all_sites: ResponseMatrix | None = None) -> CompensationPlan:
    """Voltages v minimising |A v + E|^2 + lam |v|^2 with |v_j| <= bound.

    ``measured`` is a sequence of FieldEstimate (or plain V/m values) in the
    row order of ``response``. ``all_sites`` optionally adds rows for
    unmeasured sites. Their field is estimated with a truncated Fourier fit
    of the measured values around the ring, and the predicted residual
    there is the generated field plus that estimate. With
    ``options.fill_unmeasured`` the estimated rows are also part of the
    solve.
    """
    est = _as_estimates(measured, response.sites)
    if len(est) != len(response.sites):
        raise CompensationError(f"{len(est)} measurements for {len(response.sites)} response rows")
    if options.bound <= 0:
        raise CompensationError("voltage bound must be positive")
    E_meas = np.array([e.E_T for e in est])
    extra: list[str] = []
    E_extra = np.zeros(0)
    if all_sites is not None:
        if list(all_sites.electrodes) != list(response.electrodes):
            raise CompensationError("all_sites must use the same electrode columns as response")
        extra = [s for s in all_sites.sites if s not in response.sites]
        if extra:
            E_extra = fourier_interpolate(response.sites, E_meas, extra, len(all_sites.sites),
                                          options.fourier_order)
    A, E = response.entries, E_meas
    if extra and options.fill_unmeasured:
        w = float(options.unmeasured_weight)
        A = np.vstack([A, w * all_sites.rows(extra).entries])
        E = np.concatenate([E_meas, w * E_extra])
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    lam = 1e-6 * s[0] ** 2 if options.lam is None else float(options.lam)
    if lam < 0:
        raise CompensationError("ridge weight must be >= 0")
    keep = s > s[0] * 1e-13
    filt = np.where(keep, s / np.where(keep, s * s + lam, 1.0), 0.0)
    v = -(Vt.T @ (filt * (U.T @ E)))
    bounded = False
    if np.max(np.abs(v), initial=0.0) > options.bound:
        bounded = True
        n = A.shape[1]
        M = np.vstack([A, math.sqrt(lam) * np.eye(n)]) if lam > 0 else A
        rhs = np.concatenate([-E, np.zeros(n)]) if lam > 0 else -E
        res = lsq_linear(M, rhs, bounds=(-options.bound, options.bound), method="bvls", tol=1e-12)
        v_b = res.x
        r = A @ v_b + E
        rms_in = float(np.sqrt(np.mean(E_meas**2)))
        r = r[: len(E_meas)]
        if rms_in > 0 and np.sqrt(np.mean(r**2)) > options.feasibility_tol * rms_in:
            j = int(np.argmax(np.abs(v)))
            raise CompensationError(
                f"compensation infeasible within +/-{options.bound:g} V: electrode {response.electrodes[j]} "
                f"needs {v[j]:.3g} V unbounded; bounded fit leaves {np.sqrt(np.mean(r**2)):.3g} V/m rms"
            )
        v = v_b
    volts = VoltageSet.from_vector(response.electrodes, v)
    resid = dict(zip(response.sites, (response.entries @ v + E_meas).tolist()))
    if extra:
        gen = all_sites.rows(extra).entries @ v
        for s_, g, e in zip(extra, gen, E_extra):
            resid[s_] = float(g + e)
    return CompensationPlan(response, est, volts, resid, options, lam, bounded)


def fourier_interpolate(sites: Sequence[str], values, targets: Sequence[str], n_sites: int,
                        order: int = 8) -> np.ndarray:
    """Least-squares periodic fit of per-site values, evaluated at ``targets``.

    The harmonic order is capped so the fit stays overdetermined.
    """
    th = 2 * np.pi * np.array([int(s[1:]) for s in sites], float) / n_sites
    tt = 2 * np.pi * np.array([int(s[1:]) for s in targets], float) / n_sites
    k = max(0, min(int(order), (len(sites) - 1) // 2 - 1))

    def basis(t):
        cols = [np.ones_like(t)]
        for m in range(1, k + 1):
            cols += [np.cos(m * t), np.sin(m * t)]
        return np.column_stack(cols)

    coef, *_ = np.linalg.lstsq(basis(th), np.asarray(values, float), rcond=None)
    return basis(tt) @ coef


# --------------------------------------------------------------------------
# suppression report


@dataclass(frozen=True)
class SuppressionReport:
    sites: tuple[str, ...]
    before: tuple[FieldEstimate | None, ...]
    after: tuple[FieldEstimate | None, ...]

    @staticmethod
    def _rms(ests):
        v = np.array([e.E_T for e in ests if e is not None])
        return float(np.sqrt(np.mean(v**2))) if len(v) else math.nan

    @property
    def rms_before(self) -> float:
        return self._rms(self.before)

    @property
    def rms_after(self) -> float:
        return self._rms(self.after)

    @property
    def ratio(self) -> float:
        """rms_before / rms_after; RATIO_CAP when the after rms is exactly 0."""
        b, a = self.rms_before, self.rms_after
        if a == 0:
            return RATIO_CAP if b > 0 else 1.0
        return min(b / a, RATIO_CAP)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site", "E_before_V/m", "sigma_before_V/m", "E_after_V/m", "sigma_after_V/m"])

        def cells(e):
            return ["", ""] if e is None else [f"{e.E_T:.6e}", f"{e.sigma:.6e}"]

        for s, b, a in zip(self.sites, self.before, self.after):
            w.writerow([s] + cells(b) + cells(a))
        w.writerow(["rms", f"{self.rms_before:.6e}", "", f"{self.rms_after:.6e}", ""])
        w.writerow(["ratio", f"{self.ratio:.6e}", "", "", ""])
        return buf.getvalue()


def suppression_report(before: Mapping[str, FieldEstimate | None],
                       after: Mapping[str, FieldEstimate | None]) -> SuppressionReport:
    """Pair before/after estimates by site; None marks a failed measurement."""
    if set(before) != set(after):
        raise CompensationError("before and after cover different sites")
    sites = tuple(before)
    return SuppressionReport(sites, tuple(before[s] for s in sites), tuple(after[s] for s in sites))


# --------------------------------------------------------------------------
# local well design


def local_electrodes(model: TrapModel, site: RingSite, reach: int = 4) -> list[str]:
    """Usable control electrodes within ``reach`` pitches of the site azimuth."""
    n = len(model.sites)
    pitch = 2 * math.pi / n
    out = []
    for e in model.electrodes:
        if e.role != "control" or e.shorted:
            continue
        v = np.concatenate([p.vertices for p in e.shapes])
        c = v.mean(axis=0)
        if np.hypot(*c) < 0.5 * np.min(np.hypot(v[:, 0], v[:, 1])):
            # wraps around the ring (centre electrode)
            out.append(e.id)
            continue
        d = (math.atan2(c[1], c[0]) - site.azimuth + math.pi) % (2 * math.pi) - math.pi
        if abs(d) <= (reach + 0.5) * pitch:
            out.append(e.id)
    return out


def _local_system(model, site, electrodes, base):
    """Frame-rotated fields (3, n) and energy Hessians (3, 3, n) per volt, plus base terms."""
    p = np.asarray(site.position, float)[None]
    F = site.frame  # rows T, R, Z
    table = model.edge_table
    zq = model.species.charge_number
    fields, hess = [], []
    for eid in electrodes:
        v = np.zeros(len(table.owners))
        v[table.index(eid)] = 1.0
        A, B, w, _ = table.select(v)
        E, J = _kernels.field_and_jacobian(p, A, B, w)
        fields.append(F @ E[0])
        hess.append(-zq * F @ J[0] @ F.T)
    pot = TrapPotential(model, base)
    H0 = F @ pot.hessian(p)[0] @ F.T
    E0 = np.zeros(3)
    if VoltageSet(base).max_abs:
        from .fields import e_field
        E0 = F @ e_field(model, base, p[0])
    return np.array(fields).T, np.moveaxis(np.array(hess), 0, -1), E0, H0


@dataclass(frozen=True)
class RotationResult:
    volts: VoltageSet
    angle: float
    omega_T: float
    omega_R: float
    omega_Z: float


def find_rotation_voltages(model: TrapModel, site: RingSite, target_angle: float, target_omega_T: float,
                           base: Mapping[str, float] | None = None, electrodes: Sequence[str] | None = None,
                           split: float | None = None, bound: float = DEFAULT_BOUND, reach: int = 4,
                           verify: bool = True, angle_tol: float = math.radians(1.0),
                           omega_tol: float = 0.02, detail: bool = False, radial: bool = True):
    """Control voltages giving a tangential frequency and radial-axis tilt at ``site``.

    Solves, in the minimum-norm sense over the local electrodes, eight
    linear conditions on the change from ``base``: zero static field at the
    site (3), the target tangential curvature with no T-R or T-Z coupling
    (3), and a radial block whose soft axis is tilted by ``target_angle``
    from R towards Z (2). The R/Z curvature split is ``split`` times their
    mean; ``None`` keeps the split of ``base``. With ``radial=False`` the
    last two conditions are dropped and the radial block is left to the
    minimum-norm solution. The result is checked with :func:`secular_modes`.
    """
    base = VoltageSet(base or {})
    els = local_electrodes(model, site, reach) if electrodes is None else list(electrodes)
    G, Hv, E0, H0 = _local_system(model, site, els, base)
    mass = model.species.mass
    kT = mass * target_omega_T**2 / ct.e  # eV/m^2
    # radial block of the result: mean * I + s * [[-cos2a, -sin2a], [-sin2a, cos2a]]
    trace_r = H0[1, 1] + H0[2, 2] - (kT - H0[0, 0])  # DC part is traceless
    mean = trace_r / 2
    if split is None:
        rr = H0[1:, 1:]
        s = 0.5 * math.hypot(rr[0, 0] - rr[1, 1], 2 * rr[0, 1])
    else:
        s = split * mean
    a = target_angle
    rows = [G[0], G[1], G[2], Hv[0, 0], Hv[0, 1], Hv[0, 2], Hv[1, 1] - Hv[2, 2], Hv[1, 2]]
    rhs = [-E0[0], -E0[1], -E0[2], kT - H0[0, 0], -H0[0, 1], -H0[0, 2],
           -2 * s * math.cos(2 * a) - (H0[1, 1] - H0[2, 2]), -s * math.sin(2 * a) - H0[1, 2]]
    if not radial:
        rows, rhs = rows[:6], rhs[:6]
    M = np.array(rows)
    b = np.array(rhs)
    # scale rows so field and curvature equations carry comparable weight
    scale = np.linalg.norm(M, axis=1)
    scale[scale == 0] = 1.0
    d, *_ = np.linalg.lstsq(M / scale[:, None], b / scale, rcond=None)
    volts = base + VoltageSet.from_vector(els, d)
    over = [(e, v) for e, v in volts.items() if abs(v) > bound]
    if over:
        res = lsq_linear(M / scale[:, None], b / scale, bounds=(-bound - base.vector(els), bound - base.vector(els)))
        best = base + VoltageSet.from_vector(els, res.x)
        msg = _describe(model, best, site)
        e, v = max(over, key=lambda t: abs(t[1]))
        raise CompensationError(f"target needs {v:.3g} V on {e} (bound {bound:g} V); best within bounds: {msg}")
    if not verify:
        return volts
    modes = secular_modes(model, volts, site)
    err_a = abs(modes.rotation - _fold(a)) if radial else 0.0
    err_w = abs(modes.omega_T - target_omega_T) / target_omega_T if target_omega_T > 0 else modes.omega_T / (2 * math.pi * 5e3)
    if err_a > angle_tol or err_w > omega_tol:
        raise CompensationError(
            f"verification failed at {site.label}: angle {math.degrees(modes.rotation):.3f} deg "
            f"(target {math.degrees(a):.3f}), omega_T/2pi {modes.omega_T / (2e6 * math.pi):.4f} MHz "
            f"(target {target_omega_T / (2e6 * math.pi):.4f})"
        )
    if detail:
        return RotationResult(volts, modes.rotation, modes.omega_T, modes.omega_R, modes.omega_Z)
    return volts


def _fold(a):
    a = (a + math.pi / 2) % math.pi - math.pi / 2
    return a if a > -math.pi / 2 else a + math.pi


def _describe(model, volts, site) -> str:
    try:
        m = secular_modes(model, volts, site)
    except Exception as exc:  # noqa: BLE001 - purely diagnostic
        return f"unavailable ({exc})"
    return (f"angle {math.degrees(m.rotation):.2f} deg, omega_T/2pi {m.omega_T / (2e6 * math.pi):.4f} MHz, "
            f"omega_R/2pi {m.omega_R / (2e6 * math.pi):.4f} MHz, omega_Z/2pi {m.omega_Z / (2e6 * math.pi):.4f} MHz")


def measurement_well(model: TrapModel, site: RingSite, omega_T: float, reach: int = 8, **kw) -> VoltageSet:
    """Single-ion well of tangential frequency ``omega_T`` at ``site``.

    Only the field and the tangential row of the curvature are constrained;
    the radial axes are whatever the minimum-norm solution gives.
    """
    kw.setdefault("radial", False)
    return find_rotation_voltages(model, site, 0.0, omega_T, reach=reach, **kw)


# --------------------------------------------------------------------------
# closed loop


@dataclass(frozen=True)
class LoopOptions:
    well_omega_T: float = 2 * math.pi * 1.1e6
    alphas: tuple[float, ...] = (0.8, 0.9, 1.0, 1.1, 1.2)
    noise: NoiseModel | None = None
    well_bound: float = DEFAULT_BOUND
    solve: SolveOptions = SolveOptions()


@dataclass(frozen=True)
class LoopResult:
    sites: tuple[str, ...]
    wells: dict[str, VoltageSet]
    records_before: dict
    before: dict[str, FieldEstimate | None]
    plan: CompensationPlan
    records_after: dict
    after: dict[str, FieldEstimate | None]
    report: SuppressionReport
    true_before: np.ndarray  # V/m at every model site
    true_after: np.ndarray

    def true_rms(self, labels: Sequence[str] | None = None) -> tuple[float, float]:
        labels = self.sites if labels is None else labels
        idx = [int(s[1:]) for s in labels]
        b, a = self.true_before[idx], self.true_after[idx]
        return float(np.sqrt(np.mean(b**2))), float(np.sqrt(np.mean(a**2)))


def design_wells(model: TrapModel, sites: Sequence[str], options: LoopOptions = LoopOptions()) -> dict[str, VoltageSet]:
    """Single-ion measurement well for every listed site."""
    return {lab: measurement_well(model, model.site(lab), options.well_omega_T, bound=options.well_bound)
            for lab in sites}


def site_rng(seed: int | None, phase: int, site: str) -> np.random.Generator:
    """Independent stream per (seed, measurement phase, site), so results do
    not depend on the order or parallelism of the scans."""
    if seed is None:
        return np.random.default_rng()
    return np.random.default_rng([int(seed), int(phase), int(site[1:])])


def measure_sites(model: TrapModel, wells: Mapping[str, VoltageSet], stray, sites: Sequence[str],
                  options: LoopOptions = LoopOptions(), fixed: Mapping[str, float] | None = None,
                  seed: int | None = 0, phase: int = 0, extra: Sequence = (),
                  workers: int = 1) -> tuple[dict, dict]:
    """Virtual displacement scan and field fit at each site.

    Failed scans are logged and recorded as None.
    """
    from .metrology import MeasurementError, fit_tangential_field, virtual_displacement_scan

    def one(lab):
        site = model.site(lab)
        try:
            rec = virtual_displacement_scan(model, wells[lab], stray, site, options.alphas, options.noise,
                                            site_rng(seed, phase, lab), fixed=fixed, extra=extra)
            return rec, fit_tangential_field(rec, model.species.mass, model.species.charge)
        except (MeasurementError, RuntimeError) as exc:
            log.warning("measurement at %s failed: %s", lab, exc)
            return None, None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, sites))
    else:
        results = [one(lab) for lab in sites]
    recs = {lab: r[0] for lab, r in zip(sites, results)}
    ests = {lab: r[1] for lab, r in zip(sites, results)}
    return recs, ests


def true_tangential(model: TrapModel, stray, volts: Mapping[str, float] | None = None) -> np.ndarray:
    """Tangential field (V/m) of stray plus ``volts`` at every model site."""
    T = np.array([s.t_hat for s in model.sites])
    P = np.array([s.position for s in model.sites])
    out = np.einsum("ij,ij->i", stray.field(P), T) if stray is not None else np.zeros(len(P))
    if volts:
        out = out + response_matrix(model, [s.label for s in model.sites]).field(volts)
    return out


def closed_loop(model: TrapModel, stray, sites: Sequence[str] | None = None, options: LoopOptions = LoopOptions(),
                seed: int | None = 0, response_model: TrapModel | None = None, extra: Sequence = (),
                workers: int = 1) -> LoopResult:
    """Measure, solve, apply and re-measure on a synthetic stray field.

    ``response_model`` is the model used to build the response matrix
    (defaults to ``model``); it is what the compensation believes the trap
    to be. ``extra`` potential terms (such as a loading-hole bump) act on
    the ion during every scan but are invisible to the solve.
    """
    sites = measured_site_labels(len(model.sites)) if sites is None else list(sites)
    wells = design_wells(model, sites, options)
    recs_b, before = measure_sites(model, wells, stray, sites, options, None, seed, 0, extra, workers)
    plan = plan_from_estimates(response_model or model, sites, before, options.solve)
    recs_a, after = measure_sites(model, wells, stray, sites, options, plan.delta_volts, seed, 1, extra, workers)
    return LoopResult(tuple(sites), wells, recs_b, before, plan, recs_a, after,
                      suppression_report(before, after), true_tangential(model, stray),
                      true_tangential(model, stray, plan.delta_volts))


def plan_from_estimates(model: TrapModel, sites: Sequence[str], estimates: Mapping[str, FieldEstimate | None],
                        options: SolveOptions = SolveOptions()) -> CompensationPlan:
    """Solve using the sites that were measured successfully; every other
    model site is treated as unmeasured."""
    ok = [s for s in sites if estimates.get(s) is not None]
    if not ok:
        raise CompensationError("no site could be measured")
    if len(ok) < len(sites):
        log.warning("%d sites could not be measured before compensation", len(sites) - len(ok))
    resp = response_matrix(model, ok)
    full = response_matrix(model, [s.label for s in model.sites])
    return solve_compensation(resp, [estimates[s] for s in ok], options, all_sites=full)
