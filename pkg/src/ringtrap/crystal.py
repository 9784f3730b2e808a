"""Ring crystals: equilibrium of N ions in the trap plus mutual Coulomb repulsion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import constants as ct

from .fields import (FLAT_MODE_TOL, PotentialTerm, TrapPotential, azimuth_derivatives, chain_azimuthal,
                     find_minimum_ring)
from .geometry import RingSite, TrapModel

log = logging.getLogger(__name__)

MIN_SEPARATION = 0.1e-6
FORCE_TOL = 1e-4  # eV/m


class CrystalError(ValueError):
    pass


def coulomb_constant(charge: float) -> float:
    """k_C q^2 expressed in eV * m."""
    return charge * charge / (4 * math.pi * ct.epsilon_0) / ct.e


# --------------------------------------------------------------------------
# loading-hole bump


@dataclass(frozen=True)
class HolePerturbation:
    """Gaussian hill in arc length centred on the loading hole.

    U(s) = amplitude * exp(-s^2 / (2 width^2)), s = ring_radius * (phi - phi0)
    wrapped to (-pi, pi]. The bump has no radial or vertical dependence.
    """

    center: np.ndarray
    amplitude: float  # eV
    width: float  # m

    @property
    def azimuth(self) -> float:
        return math.atan2(self.center[1], self.center[0])

    @property
    def ring_radius(self) -> float:
        return math.hypot(self.center[0], self.center[1])

    @classmethod
    def calibrated(cls, site: RingSite, mass: float, frequency: float = 9e3, width: float = 10e-6) -> "HolePerturbation":
        """Amplitude chosen so the bump's tangential curvature magnitude at
        its centre equals m (2 pi f)^2."""
        k = mass * (2 * math.pi * frequency) ** 2  # J/m^2
        return cls(np.asarray(site.position, float), k * width * width / ct.e, width)

    @property
    def curvature(self) -> float:
        """Tangential curvature at the centre, eV/m^2 (negative: a hill)."""
        return -self.amplitude / self.width**2

    def _parts(self, p):
        phi, gphi, hphi = azimuth_derivatives(p)
        dphi = (phi - self.azimuth + math.pi) % (2 * math.pi) - math.pi
        R, w = self.ring_radius, self.width
        s = R * dphi
        f = self.amplitude * np.exp(-0.5 * (s / w) ** 2)
        d1 = -f * s / w**2 * R
        d2 = f * R * R * ((s / w**2) ** 2 - 1 / w**2)
        return f, d1, d2, gphi, hphi

    def energy(self, points) -> np.ndarray:
        return self._parts(np.atleast_2d(points))[0]

    def gradient(self, points) -> np.ndarray:
        _, d1, d2, gphi, hphi = self._parts(np.atleast_2d(points))
        return d1[:, None] * gphi

    def hessian(self, points) -> np.ndarray:
        _, d1, d2, gphi, hphi = self._parts(np.atleast_2d(points))
        return chain_azimuthal(d1, d2, gphi, hphi)[1]


# --------------------------------------------------------------------------
# energy, forces, Hessian


class CrystalPotential:
    """Total energy of N ions: sum of a single-ion term plus pairwise Coulomb."""

    def __init__(self, external: PotentialTerm, kc: float):
        self.external = external
        self.kc = kc

    @staticmethod
    def _pairs(x):
        d = x[:, None, :] - x[None, :, :]
        r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
        np.fill_diagonal(r, np.inf)
        if r.min() < MIN_SEPARATION:
            i, j = np.unravel_index(np.argmin(r), r.shape)
            raise CrystalError(f"ions {i} and {j} closer than {MIN_SEPARATION * 1e6:g} um")
        return d, r

    def coulomb_energy(self, x) -> float:
        _, r = self._pairs(x)
        iu = np.triu_indices(len(x), 1)
        return float(self.kc * np.sum(1.0 / r[iu]))

    def energy(self, x) -> float:
        x = np.asarray(x, float)
        return float(np.sum(self.external.energy(x))) + (self.coulomb_energy(x) if len(x) > 1 else 0.0)

    def coulomb_gradient(self, x) -> np.ndarray:
        d, r = self._pairs(x)
        return -self.kc * np.einsum("ijk,ij->ik", d, 1.0 / r**3)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        g = self.external.gradient(x)
        if len(x) > 1:
            g = g + self.coulomb_gradient(x)
        return g

    def coulomb_hessian(self, x) -> np.ndarray:
        """(3N, 3N) Hessian of the pairwise Coulomb energy."""
        n = len(x)
        d, r = self._pairs(x)
        inv3 = 1.0 / r**3
        inv5 = inv3 / r**2
        blk = self.kc * (3 * d[:, :, :, None] * d[:, :, None, :] * inv5[:, :, None, None]
                         - np.eye(3)[None, None] * inv3[:, :, None, None])
        H = -blk
        diag = blk.sum(axis=1)
        H[np.arange(n), np.arange(n)] = diag
        return H.transpose(0, 2, 1, 3).reshape(3 * n, 3 * n)

    def hessian(self, x, exact: bool = True, order: int = 4) -> np.ndarray:
        x = np.asarray(x, float)
        n = len(x)
        H = self.coulomb_hessian(x) if n > 1 else np.zeros((3, 3))
        try:
            He = self.external.hessian(x, exact=exact, order=order)
        except TypeError:
            He = self.external.hessian(x)
        for i in range(n):
            H[3 * i:3 * i + 3, 3 * i:3 * i + 3] += He[i]
        return H


def _terms(stray, hole) -> list:
    out = []
    if stray is not None:
        out.append(stray)
    if hole is not None:
        out.append(hole)
    return out


def crystal_potential(model: TrapModel, volts, stray=None, hole=None) -> CrystalPotential:
    ext = TrapPotential(model, volts, _terms(stray, hole))
    return CrystalPotential(ext, coulomb_constant(model.species.charge))


def total_energy(model: TrapModel, volts, stray, hole, positions) -> float:
    """Total energy (eV) of the ion configuration ``positions`` (N, 3)."""
    return crystal_potential(model, volts, stray, hole).energy(_check(positions))


def forces(model: TrapModel, volts, stray, hole, positions) -> np.ndarray:
    """-grad of :func:`total_energy`, (N, 3) in eV/m."""
    return -crystal_potential(model, volts, stray, hole).gradient(_check(positions))


def _check(positions) -> np.ndarray:
    x = np.atleast_2d(np.asarray(positions, float))
    if x.shape[1] != 3:
        raise CrystalError("positions must be (N, 3)")
    if np.any(x[:, 2] <= 0):
        raise CrystalError("ion on or below the electrode plane")
    return x


# --------------------------------------------------------------------------
# solver


@dataclass(frozen=True)
class IonCrystal:
    n: int
    positions: np.ndarray
    energy: float
    max_force: float
    converged: bool
    iterations: int = 0
    message: str = ""
    energy_history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def azimuths(self) -> np.ndarray:
        return np.arctan2(self.positions[:, 1], self.positions[:, 0])

    def require_converged(self):
        if not self.converged:
            raise CrystalError(f"crystal not converged: {self.message}")


@dataclass(frozen=True)
class SolverOptions:
    force_tol: float = FORCE_TOL  # eV/m
    max_iter: int = 200
    max_step: float = 10e-6  # m, initial trust radius per ion
    max_radius: float = 200e-6  # m, cap on the grown trust radius
    exact_hessian: bool = True
    hessian_fd_order: int = 2  # enough for Newton steps; analysis uses 4


def minimize(pot: CrystalPotential, x0: np.ndarray, options: SolverOptions = SolverOptions()) -> IonCrystal:
    """Damped Newton descent with energy backtracking.

    The Hessian is made positive definite by taking absolute eigenvalues,
    floored at a small fraction of the largest, which also takes care of the
    zero-frequency rotation mode of a symmetric ring.
    """
    x = np.array(x0, float)
    n = len(x)
    u = pot.energy(x)
    hist = [u]
    msg = "iteration budget exhausted"
    it = 0
    radius = options.max_step
    for it in range(1, options.max_iter + 1):
        g = pot.gradient(x)
        fmax = float(np.max(np.linalg.norm(g, axis=1)))
        if fmax < options.force_tol:
            msg = "force tolerance reached"
            return IonCrystal(n, x, u, fmax, True, it - 1, msg, tuple(hist))
        H = pot.hessian(x, exact=options.exact_hessian, order=options.hessian_fd_order)
        lam, V = np.linalg.eigh(H)
        floor = max(np.max(np.abs(lam)), 1e-300) * 1e-9
        lam = np.maximum(np.abs(lam), floor)
        gv = V.T @ g.ravel()

        def newton(mu):
            return -(V @ (gv / (lam + mu))).reshape(n, 3)

        step = newton(0.0)
        limited = np.max(np.linalg.norm(step, axis=1)) > radius
        if limited:
            # Levenberg-Marquardt shift so the largest ion step fits the trust radius
            lo, hi = 0.0, lam[-1]
            while np.max(np.linalg.norm(newton(hi), axis=1)) > radius:
                hi *= 4
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if np.max(np.linalg.norm(newton(mid), axis=1)) > radius:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= 1e-6 * hi:
                    break
            step = newton(hi)
        t = 1.0
        accepted = False
        while t > 1e-10:
            trial = x + t * step
            try:
                if np.all(trial[:, 2] > 0):
                    u_new = pot.energy(trial)
                    if u_new <= u:
                        accepted = True
                        break
            except CrystalError:
                pass
            t *= 0.5
        if not accepted:
            # Fall back to steepest descent before giving up.
            gs = -g / max(np.max(np.abs(lam)), 1e-300)
            t = 1.0
            while t > 1e-10:
                trial = x + t * gs
                try:
                    u_new = pot.energy(trial)
                    if u_new <= u and np.any(trial != x):
                        accepted = True
                        break
                except CrystalError:
                    pass
                t *= 0.5
        if not accepted:
            msg = "line search stalled"
            break
        # grow the trust radius after a full constrained step, shrink on backtracking
        if t == 1.0 and limited:
            radius = min(2 * radius, options.max_radius)
        elif t < 1.0:
            radius = max(t * radius, 1e-9)
        x, u = trial, u_new
        hist.append(u)
    g = pot.gradient(x)
    fmax = float(np.max(np.linalg.norm(g, axis=1)))
    conv = fmax < options.force_tol
    if conv:
        msg = "force tolerance reached"
    else:
        log.warning("crystal solve stopped: %s (max force %.3g eV/m)", msg, fmax)
    return IonCrystal(n, x, u, fmax, conv, it, msg, tuple(hist))


def ring_start(model: TrapModel, n: int, seed: int | None = 0, ring=None) -> np.ndarray:
    """Equally spaced ions on the minimum ring with a seeded common phase."""
    if n < 1:
        raise CrystalError("need at least one ion")
    rng = np.random.default_rng(seed)
    phase = float(rng.uniform(0.0, 2 * math.pi / n))
    if ring is None:
        ring = find_minimum_ring(model, n_azimuths=88)
    r, z = ring.mean_radius, ring.mean_height
    th = phase + 2 * math.pi * np.arange(n) / n
    return np.column_stack([r * np.cos(th), r * np.sin(th), np.full(n, z)])


def solve_crystal(model: TrapModel, volts=None, stray=None, hole=None, n: int = 400, seed: int | None = 0,
                  options: SolverOptions = SolverOptions(), start: np.ndarray | None = None,
                  ring=None) -> IonCrystal:
    """Equilibrium of ``n`` ions, started equally spaced on the minimum ring.

    Returns an unconverged crystal (``converged=False`` with a message) when
    the iteration budget runs out.
    """
    pot = crystal_potential(model, volts, stray, hole)
    x0 = ring_start(model, n, seed, ring) if start is None else _check(start)
    return minimize(pot, x0, options)


# --------------------------------------------------------------------------
# analysis


@dataclass(frozen=True)
class SpacingStats:
    mean: float  # um
    std: float
    min: float
    max: float
    count: int

    @property
    def relative_std(self) -> float:
        return self.std / self.mean if self.mean else math.nan

    @classmethod
    def of(cls, s: np.ndarray) -> "SpacingStats":
        if len(s) == 0:
            return cls(math.nan, math.nan, math.nan, math.nan, 0)
        return cls(float(np.mean(s)), float(np.std(s)), float(np.min(s)), float(np.max(s)), len(s))


@dataclass(frozen=True)
class SpacingReport:
    """Arc spacings of a ring crystal, ordered by azimuth.

    ``spacing[i]`` is the arc length (um, on the fitted circle) from ion
    ``order[i]`` to the next ion in increasing azimuth, so the spacings
    sum to the circumference. ``gap_azimuth[i]`` is the azimuth of the
    middle of that gap in [0, 2 pi). Octants are numbered 1..8 counting
    from azimuth 0 (the loading hole) in the +phi direction.
    """

    order: np.ndarray
    azimuth: np.ndarray  # rad, sorted, in [0, 2 pi)
    spacing: np.ndarray  # um
    gap_azimuth: np.ndarray
    radius: float  # um, fitted circle
    center: np.ndarray  # um
    overall: SpacingStats
    octants: tuple[SpacingStats, ...]

    @property
    def mean(self) -> float:
        return self.overall.mean

    @property
    def std(self) -> float:
        return self.overall.std

    @property
    def circumference(self) -> float:
        return 2 * math.pi * self.radius

    def mask_excluding(self, arcs: Sequence[tuple[float, float]]) -> np.ndarray:
        """Gaps whose midpoint lies outside every (phi0, phi1) arc (rad, ccw)."""
        keep = np.ones(len(self.spacing), dtype=bool)
        for a0, a1 in arcs:
            keep &= ~_in_arc(self.gap_azimuth, a0, a1)
        return keep

    def stats_excluding(self, arcs: Sequence[tuple[float, float]]) -> SpacingStats:
        return SpacingStats.of(self.spacing[self.mask_excluding(arcs)])

    def largest_gap(self) -> tuple[float, float]:
        """(spacing um, azimuth rad) of the widest gap."""
        i = int(np.argmax(self.spacing))
        return float(self.spacing[i]), float(self.gap_azimuth[i])


def _in_arc(phi, a0, a1):
    two = 2 * math.pi
    return ((phi - a0) % two) <= ((a1 - a0) % two)


def site_arc(model: TrapModel, first: int, last: int | None = None) -> tuple[float, float]:
    """Arc covering sites g<first>..g<last> plus half a pitch on either side."""
    last = first if last is None else last
    pitch = 2 * math.pi / len(model.sites)
    a0 = model.sites[first].azimuth - pitch / 2
    a1 = model.sites[last].azimuth + pitch / 2
    return a0 % (2 * math.pi), a1 % (2 * math.pi)


def fit_circle(xy: np.ndarray) -> tuple[np.ndarray, float]:
    """Algebraic least-squares circle fit; returns (center, radius)."""
    x, y = xy[:, 0], xy[:, 1]
    A = np.column_stack([x, y, np.ones_like(x)])
    b = x * x + y * y
    (a, c, d), *_ = np.linalg.lstsq(A, b, rcond=None)
    cx, cy = a / 2, c / 2
    return np.array([cx, cy]), math.sqrt(d + cx * cx + cy * cy)


def spacing_report(crystal: IonCrystal) -> SpacingReport:
    crystal.require_converged()
    return spacing_from_positions(crystal.positions)


def spacing_from_positions(positions: np.ndarray) -> SpacingReport:
    p = np.asarray(positions, float)
    if len(p) < 3:
        raise CrystalError("need at least 3 ions for a ring spacing report")
    center, radius = fit_circle(p[:, :2])
    phi = np.arctan2(p[:, 1] - center[1], p[:, 0] - center[0]) % (2 * math.pi)
    order = np.argsort(phi, kind="stable")
    ph = phi[order]
    dphi = np.diff(np.append(ph, ph[0] + 2 * math.pi))
    spacing = radius * dphi * 1e6
    mid = (ph + dphi / 2) % (2 * math.pi)
    octs = tuple(
        SpacingStats.of(spacing[(mid >= k * math.pi / 4) & (mid < (k + 1) * math.pi / 4)]) for k in range(8)
    )
    return SpacingReport(order, ph, spacing, mid, radius * 1e6, center * 1e6, SpacingStats.of(spacing), octs)


def crystal_hessian(crystal: IonCrystal, model: TrapModel, volts=None, stray=None, hole=None) -> np.ndarray:
    """Full (3N, 3N) Hessian of the total energy (eV/m^2) at the crystal."""
    pot = crystal_potential(model, volts, stray, hole)
    return pot.hessian(crystal.positions, exact=True)


def ion_ion_strength(crystal: IonCrystal, model: TrapModel, volts=None, stray=None, hole=None) -> np.ndarray:
    """Per-ion tangential confinement frequency (rad/s).

    sqrt(t^T H_ii t * e / m) with H_ii the ion's own 3x3 block of the full
    crystal Hessian, i.e. the curvature felt by one ion with all others
    held fixed, and t the local tangential unit vector.
    """
    crystal.require_converged()
    x = crystal.positions
    pot = crystal_potential(model, volts, stray, hole)
    n = len(x)
    He = pot.external.hessian(x, exact=True)
    if n > 1:
        d, r = pot._pairs(x)
        inv3 = 1.0 / r**3
        inv5 = inv3 / r**2
        blk = pot.kc * (3 * np.einsum("ijk,ijl,ij->ikl", d, d, inv5) - np.eye(3)[None] * inv3.sum(axis=1)[:, None, None])
        He = He + blk
    phi = np.arctan2(x[:, 1], x[:, 0])
    t = np.column_stack([-np.sin(phi), np.cos(phi), np.zeros(n)])
    k = np.einsum("ni,nij,nj->n", t, He, t)
    return np.sqrt(np.clip(k, 0, None) * ct.e / model.species.mass)


@dataclass(frozen=True)
class NormalModes:
    frequencies: np.ndarray  # rad/s, ascending; flat modes are 0
    vectors: np.ndarray  # columns, mass-weighted equal masses so plain eigvecs


def normal_modes(pot: CrystalPotential, positions: np.ndarray, mass: float) -> NormalModes:
    """Small-oscillation modes of equal-mass ions about ``positions``."""
    H = pot.hessian(np.asarray(positions, float), exact=True)
    lam, V = np.linalg.eigh(H)
    scale = max(np.max(np.abs(lam)), 1e-300)
    lam = np.where(np.abs(lam) < FLAT_MODE_TOL * scale, 0.0, lam)
    if np.any(lam < 0):
        raise CrystalError("configuration is not a minimum (negative curvature)")
    return NormalModes(np.sqrt(lam * ct.e / mass), V)
