"""Synthetic stray fields and a virtual version of the field-measurement procedure.

Tangential fields are inferred from how far a single ion moves as the
confining control voltages are scaled; radial components are reported at
the detection threshold of the (not simulated) probing techniques.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import constants as ct

from .fields import (FLAT_MODE_TOL, ConvergenceError, TrapPotential, VoltageSet, azimuth_derivatives,
                     chain_azimuthal, local_minimum, modes_from_hessian)
from .geometry import RingSite, TrapModel

K_E = 1 / (4 * math.pi * ct.epsilon_0)


class MeasurementError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# stray fields


@dataclass(frozen=True)
class PointCharge:
    position: tuple[float, float, float]  # m, z >= 0
    charge: float  # C

    def __post_init__(self):
        if self.position[2] < 0:
            raise ValueError("stray charges must lie on or above the electrode plane")


@dataclass(frozen=True)
class Harmonic:
    """Tangential Fourier component A cos(n phi - phase) on the reference ring."""

    order: int
    amplitude: float  # V/m
    phase: float  # rad

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise ValueError("harmonic order must be a positive integer")


@dataclass(frozen=True)
class StrayFieldModel:
    """Sum of point charges (each with its image across z = 0) and ring harmonics.

    Harmonic n derives from phi_n = -(A R / n) sin(n phi - phase), a function
    of azimuth only: its field is purely tangential, A (R / r) cos(n phi -
    phase), with R = ``ring_radius``. It is a bookkeeping device for
    prescribing tangential strays rather than a solution of Laplace's
    equation; only the point charges carry radial and vertical components.
    The model acts as a potential
    term on an ion of charge number ``charge_number`` (energy +Z phi in eV).
    """

    point_charges: tuple[PointCharge, ...] = ()
    harmonics: tuple[Harmonic, ...] = ()
    ring_radius: float = 625e-6
    seed: int | None = None
    charge_number: float = 1.0

    @property
    def is_empty(self) -> bool:
        return not self.point_charges and not self.harmonics

    def scaled(self, factor: float) -> "StrayFieldModel":
        return replace(
            self,
            point_charges=tuple(PointCharge(c.position, c.charge * factor) for c in self.point_charges),
            harmonics=tuple(Harmonic(h.order, h.amplitude * factor, h.phase) for h in self.harmonics),
        )

    def __add__(self, other: "StrayFieldModel") -> "StrayFieldModel":
        return replace(self, point_charges=self.point_charges + other.point_charges,
                       harmonics=self.harmonics + other.harmonics)

    def with_charge_number(self, z: float) -> "StrayFieldModel":
        return replace(self, charge_number=z)

    # arrays of (source position, charge) including images
    def _sources(self):
        if not self.point_charges:
            return np.zeros((0, 3)), np.zeros(0)
        p = np.array([c.position for c in self.point_charges], float)
        q = np.array([c.charge for c in self.point_charges], float)
        img = p * np.array([1.0, 1.0, -1.0])
        return np.vstack([p, img]), np.concatenate([q, -q])

    def _charge_offsets(self, p):
        src, q = self._sources()
        d = p[:, None, :] - src[None, :, :]
        r = np.sqrt(np.einsum("mkj,mkj->mk", d, d))
        if r.size and np.min(r) < 1e-12:
            raise ValueError("stray field evaluated at a charge location")
        return d, r, q

    def potential(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, float))
        out = np.zeros(len(p))
        if self.point_charges:
            _, r, q = self._charge_offsets(p)
            out += K_E * (q[None, :] / r).sum(axis=1)
        if self.harmonics:
            phi = np.arctan2(p[:, 1], p[:, 0])
            R = self.ring_radius
            for h in self.harmonics:
                out -= h.amplitude * R / h.order * np.sin(h.order * phi - h.phase)
        return out

    def field(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, float))
        E = np.zeros((len(p), 3))
        if self.point_charges:
            d, r, q = self._charge_offsets(p)
            E += K_E * np.einsum("mkj,mk->mj", d, q[None, :] / r**3)
        if self.harmonics:
            _, d1, _, gphi, _ = self._harmonic_derivs(p, hessian=False)
            E -= d1[:, None] * gphi
        return E

    def _harmonic_derivs(self, p, hessian=True):
        phi, gphi, hphi = azimuth_derivatives(p)
        R = self.ring_radius
        d1 = np.zeros(len(p))
        d2 = np.zeros(len(p))
        for h in self.harmonics:
            u = h.order * phi - h.phase
            d1 -= h.amplitude * R * np.cos(u)
            d2 += h.amplitude * R * h.order * np.sin(u)
        return phi, d1, d2, gphi, hphi

    def potential_hessian(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, float))
        H = np.zeros((len(p), 3, 3))
        if self.point_charges:
            d, r, q = self._charge_offsets(p)
            w3 = K_E * q[None, :] / r**3
            w5 = 3 * K_E * q[None, :] / r**5
            H += np.einsum("mk,mki,mkj->mij", w5, d, d) - np.eye(3)[None] * w3.sum(axis=1)[:, None, None]
        if self.harmonics:
            _, d1, d2, gphi, hphi = self._harmonic_derivs(p)
            H += chain_azimuthal(d1, d2, gphi, hphi)[1]
        return H

    # potential-term protocol (eV)
    def energy(self, points) -> np.ndarray:
        return self.charge_number * self.potential(points)

    def gradient(self, points) -> np.ndarray:
        return -self.charge_number * self.field(points)

    def hessian(self, points) -> np.ndarray:
        return self.charge_number * self.potential_hessian(points)

    def tangential(self, sites: Sequence[RingSite]) -> np.ndarray:
        """E_T at the given site positions, V/m."""
        if not sites:
            return np.zeros(0)
        E = self.field(np.array([s.position for s in sites]))
        return np.einsum("ij,ij->i", E, np.array([s.t_hat for s in sites]))

    @classmethod
    def random(cls, seed: int, ring_radius: float = 625e-6, max_order: int = 5, n_harmonics: int = 3,
               n_charges: int = 0, charge_height: tuple[float, float] = (1e-6, 20e-6),
               radial_spread: float = 150e-6, charge_scale: float = 1e-15) -> "StrayFieldModel":
        """Random harmonics (unit amplitude scale) and surface charges near the ring."""
        rng = np.random.default_rng(seed)
        orders = rng.choice(np.arange(1, max_order + 1), size=min(n_harmonics, max_order), replace=False)
        hs = tuple(Harmonic(int(n), float(rng.uniform(0.3, 1.0)), float(rng.uniform(0, 2 * math.pi)))
                   for n in sorted(orders))
        cs = []
        for _ in range(n_charges):
            phi = rng.uniform(0, 2 * math.pi)
            r = ring_radius + rng.uniform(-radial_spread, radial_spread)
            z = rng.uniform(*charge_height)
            cs.append(PointCharge((r * math.cos(phi), r * math.sin(phi), z), float(rng.normal() * charge_scale)))
        return cls(tuple(cs), hs, ring_radius, seed)


def stray_field(stray: StrayFieldModel, point) -> np.ndarray:
    """Stray electric field (V/m) at ``point`` (3,) or points (M, 3)."""
    p = np.asarray(point, float)
    if np.any(np.atleast_2d(p)[:, 2] <= 0):
        raise ValueError("stray field requested on or below the electrode plane")
    E = stray.field(p)
    return E[0] if p.ndim == 1 else E


def normalize_peak(stray: StrayFieldModel, sites: Sequence[RingSite], peak: float) -> StrayFieldModel:
    """Rescale so the largest |E_T| over ``sites`` equals ``peak`` (V/m)."""
    cur = np.max(np.abs(stray.tangential(sites)))
    if cur == 0:
        return stray
    return stray.scaled(peak / cur)


# --------------------------------------------------------------------------
# displacement scans


@dataclass(frozen=True)
class NoiseModel:
    sigma_x: float = 0.2e-6  # m, per position reading
    omega_rel: float = 0.01  # relative, on omega_T

    def __post_init__(self):
        if self.sigma_x < 0 or self.omega_rel < 0:
            raise ValueError("noise levels must be >= 0")


NO_NOISE = NoiseModel(0.0, 0.0)

DEFAULT_ALPHAS = (0.5, 0.7, 1.0, 1.5, 2.0)


@dataclass(frozen=True)
class MeasurementRecord:
    site: RingSite
    alphas: np.ndarray
    displacements: np.ndarray  # m, tangential, relative to the reference
    omega_T_ref: float  # rad/s at alpha = 1
    noise: NoiseModel = NO_NOISE
    positions: np.ndarray | None = field(default=None, repr=False)  # equilibria (n_alpha, 3)
    reference: np.ndarray | None = field(default=None, repr=False)
    omega_T: np.ndarray | None = field(default=None, repr=False)  # per alpha, noise-free

    def __post_init__(self):
        a = np.asarray(self.alphas, float)
        if np.any(a <= 0) or np.any(np.diff(a) <= 0):
            raise MeasurementError("alphas must be positive and strictly increasing")
        if not np.all(np.isfinite(self.displacements)):
            raise MeasurementError("non-finite displacement")

    def with_noise(self, noise: NoiseModel, rng: np.random.Generator) -> "MeasurementRecord":
        """Copy with imaging noise on displacements and relative noise on omega_T."""
        x = self.displacements + rng.normal(0.0, noise.sigma_x, len(self.displacements)) if noise.sigma_x else self.displacements
        w = self.omega_T_ref * (1 + rng.normal(0.0, noise.omega_rel)) if noise.omega_rel else self.omega_T_ref
        return replace(self, displacements=np.asarray(x, float), omega_T_ref=float(w), noise=noise)

    def to_dict(self) -> dict:
        return {
            "site": self.site.label,
            "alphas": [float(a) for a in self.alphas],
            "displacements_um": [float(x * 1e6) for x in self.displacements],
            "omega_T_ref_MHz": self.omega_T_ref / (2 * math.pi * 1e6),
            "noise": {"sigma_x_um": self.noise.sigma_x * 1e6, "omega_rel": self.noise.omega_rel},
        }


@dataclass(frozen=True)
class FieldEstimate:
    E_T: float  # V/m
    sigma: float  # V/m
    residual: float  # rms fit residual, m
    site: str = ""

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")


def _fixed(fixed) -> VoltageSet:
    return VoltageSet(fixed or {})


def _equilibrium(model, volts, stray, start, site, alpha, max_shift, extra=()):
    terms = [stray] if stray is not None and not stray.is_empty else []
    pot = TrapPotential(model, volts, terms + list(extra))
    x, _, ok = local_minimum(pot, start, max_iter=200)
    if not ok:
        raise MeasurementError(f"no equilibrium near {site.label} at alpha={alpha:g}")
    if np.linalg.norm(x - site.position) > max_shift:
        raise MeasurementError(f"ion left the {site.label} well at alpha={alpha:g}")
    H = pot.hessian(x)[0]
    lam = np.linalg.eigvalsh(H)
    if lam[0] < -FLAT_MODE_TOL * np.max(np.abs(lam)):
        raise MeasurementError(f"well at {site.label} unstable at alpha={alpha:g}")
    return x, H


def virtual_displacement_scan(model: TrapModel, volts: Mapping[str, float], stray: StrayFieldModel | None,
                              site: RingSite, alphas: Sequence[float] = DEFAULT_ALPHAS,
                              noise: NoiseModel | None = None, rng: np.random.Generator | None = None,
                              fixed: Mapping[str, float] | None = None, reference: str | float = "unperturbed",
                              max_shift: float | None = None, extra: Sequence = ()) -> MeasurementRecord:
    """Scale the well voltages by each alpha and record the tangential shift.

    ``volts`` is the single-ion well that gets scaled; ``fixed`` voltages
    (e.g. an applied compensation) are added unscaled. ``reference`` fixes
    the zero of the displacement, i.e. the alpha -> infinity position:

    ``"unperturbed"``
        the well's own equilibrium with the stray removed, which is the
        tangential limit of the scan as alpha grows;
    ``"extrapolate"``
        intercept of a quadratic fit of position against 1/alpha;
    a number
        the equilibrium at that (large) alpha.

    ``extra`` holds further potential terms acting on the ion (e.g. a
    loading-hole bump) that the reference calculation does not know about.
    Noise is applied with ``rng`` when ``noise`` is given.
    """
    alphas = np.asarray(alphas, float)
    if len(alphas) < 1:
        raise MeasurementError("need at least one alpha")
    base = VoltageSet(volts)
    fx = _fixed(fixed)
    pitch = 2 * math.pi * model.ring_radius / max(len(model.sites), 1)
    max_shift = pitch if max_shift is None else max_shift
    t = site.t_hat
    pos, oms = [], []
    start = np.asarray(site.position, float)
    # walk from the stiffest well down so each solve starts near its answer
    for a in alphas[::-1]:
        x, H = _equilibrium(model, base.scaled(a) + fx, stray, start, site, a, max_shift, extra)
        pos.append(x)
        oms.append(math.sqrt(max(t @ H @ t, 0.0) * ct.e / model.species.mass))
        start = x
    pos = np.array(pos[::-1])
    oms = np.array(oms[::-1])
    s = pos @ t  # tangential coordinate, straight-line approximation over the scan
    if reference == "unperturbed":
        ref, _ = _equilibrium(model, base, None, site.position, site, math.inf, max_shift)
    elif reference == "extrapolate":
        u = 1 / alphas
        coef = np.polynomial.polynomial.polyfit(u, s, min(2, len(alphas) - 1))
        ref = pos[-1] + (coef[0] - s[-1]) * t
    else:
        a_ref = float(reference)
        ref, _ = _equilibrium(model, base.scaled(a_ref) + fx, stray, pos[-1], site, a_ref, max_shift, extra)
    disp = s - ref @ t
    i1 = int(np.argmin(np.abs(alphas - 1.0)))
    if not math.isclose(alphas[i1], 1.0):
        om_ref = oms[i1] / math.sqrt(alphas[i1])
    else:
        om_ref = oms[i1]
    rec = MeasurementRecord(site, alphas, disp, float(om_ref), NO_NOISE, pos, ref, oms)
    if noise is not None and (noise.sigma_x or noise.omega_rel):
        rec = rec.with_noise(noise, rng if rng is not None else np.random.default_rng())
    return rec


def fit_tangential_field(record: MeasurementRecord, mass: float | None = None, charge: float = ct.e,
                         sigma_x: float | None = None, omega_rel: float | None = None) -> FieldEstimate:
    """Least-squares slope of displacement against 1/alpha through the origin.

    E_T = slope * m * omega_T^2 / q. The uncertainty combines the slope
    error from position noise and the omega_T error to first order. The
    noise levels default to those recorded in ``record``.
    """
    a = np.asarray(record.alphas, float)
    x = np.asarray(record.displacements, float)
    if len(a) < 3:
        raise MeasurementError("need at least 3 scalings")
    if len(np.unique(a)) < 3:
        raise MeasurementError("degenerate alphas")
    from .geometry import CA40_MASS

    m = CA40_MASS if mass is None else mass
    sx = record.noise.sigma_x if sigma_x is None else sigma_x
    wr = record.noise.omega_rel if omega_rel is None else omega_rel
    u = 1 / a
    suu = float(u @ u)
    slope = float(u @ x) / suu
    k = m * record.omega_T_ref**2 / charge
    E = slope * k
    res = x - slope * u
    rms = float(np.sqrt(np.mean(res**2)))
    sig_slope = sx / math.sqrt(suu)
    sigma = math.hypot(sig_slope * k, 2 * wr * abs(E))
    return FieldEstimate(E, sigma, rms, record.site.label)


def expected_sigma(record: MeasurementRecord, E_T: float, mass: float, noise: NoiseModel, charge: float = ct.e) -> float:
    """First-order sigma of the estimator for a given true field."""
    u = 1 / np.asarray(record.alphas, float)
    k = mass * record.omega_T_ref**2 / charge
    return math.hypot(noise.sigma_x / math.sqrt(float(u @ u)) * k, 2 * noise.omega_rel * abs(E_T))


# --------------------------------------------------------------------------
# radial components


@dataclass(frozen=True)
class RadialProbe:
    E_R: float
    E_Z: float
    sigma_R: float
    sigma_Z: float
    position: np.ndarray
    site: str = ""


def probe_radial_components(model: TrapModel, volts: Mapping[str, float] | None, stray: StrayFieldModel | None,
                            site: RingSite, thresholds: tuple[float, float] = (1.0, 5.0)) -> RadialProbe:
    """Stray R and Z field at the single-ion equilibrium, with threshold uncertainties."""
    pot = TrapPotential(model, volts, [stray] if stray is not None and not stray.is_empty else [])
    x, _, ok = local_minimum(pot, site.position, max_iter=200)
    if not ok:
        raise ConvergenceError(f"no equilibrium near {site.label}")
    if stray is None or stray.is_empty:
        er = ez = 0.0
    else:
        E = stray.field(x)[0]
        frame = RingSite(site.label, math.atan2(x[1], x[0]), x)
        er, ez = float(E @ frame.r_hat), float(E @ frame.z_hat)
    return RadialProbe(er, ez, float(thresholds[0]), float(thresholds[1]), x, site.label)
