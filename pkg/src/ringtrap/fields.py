"""Electrostatics of the trap in the gapless-plane approximation.

Static potentials come from the control voltages, the ponderomotive
pseudopotential from the rf rails. Energies exposed to users are in eV for
the model's ion species; positions and fields are SI.
"""

from __future__ import annotations

import heapq
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy import constants as ct
from scipy.optimize import linear_sum_assignment

from . import _kernels
from .geometry import GAP, Electrode, RingSite, TrapModel

log = logging.getLogger(__name__)

# Relative eigenvalue magnitude below which a Hessian mode counts as flat.
FLAT_MODE_TOL = 1e-7


class FieldError(ValueError):
    """Evaluation outside the domain of the field model (z <= 0)."""


class ConvergenceError(RuntimeError):
    pass


class SaddlePointError(RuntimeError):
    def __init__(self, message: str, direction: np.ndarray):
        super().__init__(message)
        self.direction = direction


class VoltageSet(Mapping):
    """Electrode id -> volts. Missing ids are 0 V.

    Keys are electrode ids of a model, or ``"gap"`` for the gap strips and the
    loading hole (normally grounded). Shorted electrodes are pinned to 0 V
    when the set is applied to a model.
    """

    def __init__(self, volts: Mapping[str, float] | None = None, **kw: float):
        d = dict(volts or {})
        d.update(kw)
        self._v = {k: float(v) for k, v in d.items()}
        for k, v in self._v.items():
            if not math.isfinite(v):
                raise ValueError(f"non-finite voltage on {k}")

    def __getitem__(self, key: str) -> float:
        return self._v[key]

    def __iter__(self):
        return iter(self._v)

    def __len__(self) -> int:
        return len(self._v)

    def __repr__(self) -> str:
        nz = {k: v for k, v in self._v.items() if v != 0}
        return f"VoltageSet({nz})"

    def get(self, key: str, default: float = 0.0) -> float:
        return self._v.get(key, default)

    def scaled(self, alpha: float) -> "VoltageSet":
        return VoltageSet({k: alpha * v for k, v in self._v.items()})

    def __mul__(self, alpha: float) -> "VoltageSet":
        return self.scaled(alpha)

    __rmul__ = __mul__

    def __add__(self, other: Mapping[str, float]) -> "VoltageSet":
        out = dict(self._v)
        for k, v in other.items():
            out[k] = out.get(k, 0.0) + v
        return VoltageSet(out)

    def __sub__(self, other: Mapping[str, float]) -> "VoltageSet":
        return self + VoltageSet(other).scaled(-1.0)

    def vector(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self._v.get(i, 0.0) for i in ids])

    @classmethod
    def from_vector(cls, ids: Sequence[str], values: Iterable[float]) -> "VoltageSet":
        return cls(dict(zip(ids, (float(v) for v in values))))

    def pinned(self, model: TrapModel) -> "VoltageSet":
        return VoltageSet({k: v for k, v in self._v.items() if not _is_shorted(model, k)})

    @property
    def max_abs(self) -> float:
        return max((abs(v) for v in self._v.values()), default=0.0)


def _is_shorted(model: TrapModel, key: str) -> bool:
    return key != GAP and model.electrode(key).shorted


def _owner_volts(model: TrapModel, volts: Mapping[str, float]) -> np.ndarray:
    table = model.edge_table
    v = np.zeros(len(table.owners))
    for k, val in volts.items():
        if val == 0:
            continue
        i = table.index(k)
        if k != GAP and model.electrodes[i].shorted:
            log.debug("ignoring %g V on shorted electrode %s", val, k)
            continue
        v[i] = val
    return v


def _points(point) -> tuple[np.ndarray, bool]:
    p = np.asarray(point, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[-1] != 3:
        raise FieldError("points must have 3 coordinates")
    if np.any(p[:, 2] <= 0):
        raise FieldError("field undefined on or below the electrode plane (z <= 0)")
    return p, single


def _out(x, single):
    return x[0] if single else x


@dataclass(frozen=True)
class FieldSample:
    position: np.ndarray
    potential: float
    e_field: np.ndarray


# --------------------------------------------------------------------------
# static potentials


def unit_potential(electrode: Electrode, point) -> float | np.ndarray:
    """Potential with ``electrode`` at 1 V and everything else grounded."""
    p, single = _points(point)
    A = np.concatenate([s.edges()[0] for s in electrode.shapes])
    B = np.concatenate([s.edges()[1] for s in electrode.shapes])
    val = _kernels.potential(p, A, B, np.ones(len(A)))
    if electrode.exterior:
        val = 1.0 - val
    return _out(val, single)


def potential(model: TrapModel, volts: Mapping[str, float], point) -> float | np.ndarray:
    p, single = _points(point)
    A, B, w, offset = model.edge_table.select(_owner_volts(model, volts))
    return _out(_kernels.potential(p, A, B, w) + offset, single)


def e_field(model: TrapModel, volts: Mapping[str, float], point) -> np.ndarray:
    """-grad(potential), closed form."""
    p, single = _points(point)
    A, B, w, _ = model.edge_table.select(_owner_volts(model, volts))
    return _out(_kernels.field(p, A, B, w), single)


def field_jacobian(model: TrapModel, volts: Mapping[str, float], point):
    """Field and its Jacobian dE_i/dx_j; the potential Hessian is -J."""
    p, single = _points(point)
    A, B, w, _ = model.edge_table.select(_owner_volts(model, volts))
    E, J = _kernels.field_and_jacobian(p, A, B, w)
    return (_out(E, single), _out(J, single))


def sample(model: TrapModel, volts: Mapping[str, float], point) -> FieldSample:
    return FieldSample(np.asarray(point, float), float(potential(model, volts, point)), e_field(model, volts, point))


def rf_volts(model: TrapModel) -> VoltageSet:
    return VoltageSet({i: model.rf_drive.amplitude for i in model.rf_ids})


# --------------------------------------------------------------------------
# pseudopotential


def _pseudo_coeff(model: TrapModel) -> float:
    """Psi = coeff * |E_rf|^2 in eV."""
    q, m, om = model.species.charge, model.species.mass, model.rf_drive.omega
    return q * q / (4 * m * om * om) / ct.e


def rf_pseudopotential(model: TrapModel, point) -> float | np.ndarray:
    """q^2 |E_rf|^2 / (4 m Omega^2), in eV."""
    E = e_field(model, rf_volts(model), point)
    return _pseudo_coeff(model) * np.sum(E * E, axis=-1)


def rf_pseudopotential_gradient(model: TrapModel, point) -> np.ndarray:
    E, J = field_jacobian(model, rf_volts(model), point)
    return 2 * _pseudo_coeff(model) * np.einsum("...i,...ij->...j", E, J)


def azimuth_derivatives(points: np.ndarray):
    """phi = atan2(y, x) with its gradient (M, 3) and Hessian (M, 3, 3)."""
    p = np.atleast_2d(points)
    x, y = p[:, 0], p[:, 1]
    rho2 = x * x + y * y
    grad = np.column_stack([-y / rho2, x / rho2, np.zeros_like(x)])
    H = np.zeros((len(x), 3, 3))
    r4 = rho2 * rho2
    H[:, 0, 0] = 2 * x * y / r4
    H[:, 1, 1] = -2 * x * y / r4
    H[:, 0, 1] = H[:, 1, 0] = (y * y - x * x) / r4
    return np.arctan2(y, x), grad, H


def chain_azimuthal(d1: np.ndarray, d2: np.ndarray, grad: np.ndarray, hess: np.ndarray):
    """Cartesian gradient and Hessian of f(phi) from f', f'' and phi's derivatives."""
    g = d1[:, None] * grad
    H = d2[:, None, None] * grad[:, :, None] * grad[:, None, :] + d1[:, None, None] * hess
    return g, H


class PotentialTerm(Protocol):
    def energy(self, points: np.ndarray) -> np.ndarray: ...
    def gradient(self, points: np.ndarray) -> np.ndarray: ...
    def hessian(self, points: np.ndarray) -> np.ndarray: ...


class TrapPotential:
    """Single-ion potential energy (eV) of the model's species.

    Sums the pseudopotential, the control-electrode potential times the
    ion's charge number, and any extra terms (stray fields, loading-hole
    bump) that implement ``energy/gradient/hessian`` on (M, 3) arrays.
    """

    def __init__(self, model: TrapModel, volts: Mapping[str, float] | None = None, extra: Sequence[PotentialTerm] = ()):
        self.model = model
        self.volts = VoltageSet(volts or {})
        self.extra = tuple(extra)
        self._c = _pseudo_coeff(model)
        self._zq = model.species.charge_number
        table = model.edge_table
        self._rf = table.select(_owner_volts(model, rf_volts(model)))
        self._dc = table.select(_owner_volts(model, self.volts))

    def _check(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if np.any(p[:, 2] <= 0):
            raise FieldError("ion position on or below the electrode plane")
        return p

    def energy(self, points) -> np.ndarray:
        p = self._check(points)
        A, B, w, _ = self._rf
        u = np.zeros(len(p))
        if len(w):
            E = _kernels.field(p, A, B, w)
            u += self._c * np.sum(E * E, axis=1)
        A, B, w, off = self._dc
        if len(w) or off:
            u += self._zq * (_kernels.potential(p, A, B, w) + off)
        for t in self.extra:
            u += t.energy(p)
        return u

    def gradient(self, points) -> np.ndarray:
        p = self._check(points)
        g = np.zeros((len(p), 3))
        A, B, w, _ = self._rf
        if len(w):
            E, J = _kernels.field_and_jacobian(p, A, B, w)
            g += 2 * self._c * np.einsum("mi,mij->mj", E, J)
        A, B, w, _ = self._dc
        if len(w):
            g -= self._zq * _kernels.field(p, A, B, w)
        for t in self.extra:
            g += t.gradient(p)
        return g

    def hessian(self, points, exact: bool = True, step: float = 0.5e-6, order: int = 4) -> np.ndarray:
        """Per-point 3x3 Hessian in eV/m^2.

        The pseudopotential part is 2c (J^T J + sum_k E_k dJ_k); the second
        term is obtained from a central difference (``order`` 2 or 4) of the
        analytic Jacobian and is skipped with ``exact=False`` (Gauss-Newton
        form, accurate where the rf field nearly vanishes).
        """
        if order not in (2, 4):
            raise ValueError("finite-difference order must be 2 or 4")
        p = self._check(points)
        H = np.zeros((len(p), 3, 3))
        A, B, w, _ = self._rf
        if len(w):
            E, J = _kernels.field_and_jacobian(p, A, B, w)
            H += 2 * self._c * np.einsum("mki,mkj->mij", J, J)
            if exact:
                for j in range(3):
                    d = np.zeros(3)
                    d[j] = step
                    if order == 4:
                        Js = [_kernels.field_and_jacobian(p + s * d, A, B, w)[1] for s in (-2, -1, 1, 2)]
                        dJ = (Js[0] - 8 * Js[1] + 8 * Js[2] - Js[3]) / (12 * step)  # d/dx_j of J[k, i]
                    else:
                        Js = [_kernels.field_and_jacobian(p + s * d, A, B, w)[1] for s in (-1, 1)]
                        dJ = (Js[1] - Js[0]) / (2 * step)
                    H[:, :, j] += 2 * self._c * np.einsum("mk,mki->mi", E, dJ)
                H = 0.5 * (H + H.transpose(0, 2, 1))
        A, B, w, _ = self._dc
        if len(w):
            _, Jdc = _kernels.field_and_jacobian(p, A, B, w)
            H -= self._zq * Jdc
        for t in self.extra:
            H += t.hessian(p)
        return H

    def __call__(self, point) -> float:
        return float(self.energy(np.atleast_2d(point))[0])


# --------------------------------------------------------------------------
# minimum ring


@dataclass(frozen=True)
class MinimumRing:
    azimuths: np.ndarray
    r: np.ndarray
    z: np.ndarray
    residual: np.ndarray  # |E_rf| at each minimum, V/m
    sites: tuple[RingSite, ...] = ()

    @property
    def mean_radius(self) -> float:
        return float(np.mean(self.r))

    @property
    def mean_height(self) -> float:
        return float(np.mean(self.z))

    def apply(self, model: TrapModel) -> TrapModel:
        """Model with site positions moved onto the found minimum."""
        return model.with_sites(self.sites)


def _rf_null(model: TrapModel, azimuths: np.ndarray, r0: np.ndarray, z0: np.ndarray, tol: float, max_iter: int):
    """Gauss-Newton on E_rf(r, z) = 0 in each azimuthal half-plane."""
    vs = rf_volts(model)
    c, s = np.cos(azimuths), np.sin(azimuths)
    r, z = r0.astype(float).copy(), z0.astype(float).copy()
    done = np.zeros(len(r), dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(~done)
        if not len(idx):
            break
        pts = np.column_stack([r[idx] * c[idx], r[idx] * s[idx], z[idx]])
        E, J = field_jacobian(model, vs, pts)
        Jr = J[:, :, 0] * c[idx, None] + J[:, :, 1] * s[idx, None]
        Jz = J[:, :, 2]
        M = np.stack([Jr, Jz], axis=2)  # (n, 3, 2)
        for n, i in enumerate(idx):
            step, *_ = np.linalg.lstsq(M[n], -E[n], rcond=None)
            r[i] += step[0]
            z[i] += step[1]
            if np.hypot(*step) < tol:
                done[i] = True
    pts = np.column_stack([r * c, r * s, z])
    resid = np.linalg.norm(e_field(model, vs, pts), axis=1) if len(pts) else np.zeros(0)
    return r, z, done, resid


def find_minimum_ring(model: TrapModel, n_azimuths: int = 88, tol: float = 1e-12, max_iter: int = 50) -> MinimumRing:
    """Locate the pseudopotential minimum in each azimuthal half-plane.

    The minimum of q^2|E|^2/(4 m Omega^2) is the rf null, so it is found by
    Gauss-Newton on E(r, z) = 0 from the nominal ring. Site positions are
    refined the same way; use ``ring.apply(model)`` to get the updated model.
    """
    if model.rf_drive.amplitude <= 0:
        raise ValueError("rf amplitude must be positive to define a minimum ring")
    params = model.params
    r_nom = params.ring_radius if params else model.ring_radius
    z_nom = model.sites[0].position[2] if model.sites else 80e-6
    az = np.arange(n_azimuths) * (2 * math.pi / n_azimuths)
    site_az = np.array([s.azimuth for s in model.sites])
    all_az = np.concatenate([az, site_az])
    r, z, ok, resid = _rf_null(model, all_az, np.full(len(all_az), r_nom), np.full(len(all_az), z_nom), tol, max_iter)
    if not np.all(ok):
        bad = all_az[~ok][0]
        raise ConvergenceError(f"rf null search did not converge at azimuth {math.degrees(bad):.4f} deg")
    n = n_azimuths
    sites = tuple(
        s.moved_to((r[n + i] * math.cos(s.azimuth), r[n + i] * math.sin(s.azimuth), z[n + i]))
        for i, s in enumerate(model.sites)
    )
    return MinimumRing(az, r[:n], z[:n], resid[:n], sites)


def refine_sites(model: TrapModel) -> TrapModel:
    return find_minimum_ring(model, n_azimuths=0).apply(model)


# --------------------------------------------------------------------------
# single-ion equilibrium


def local_minimum(pot: TrapPotential, x0, tol: float = 1e-12, max_iter: int = 100, max_step: float = 5e-6,
                  gtol: float = 1e-4):
    """Damped Newton descent to the nearest local minimum of ``pot``.

    Negative or flat curvature directions are handled by taking a bounded
    gradient step along them; steps are accepted only if the energy does
    not increase. Converged when the step falls below ``tol`` (m) or the
    gradient below ``gtol`` (eV/m). Returns (position, energy, converged).
    """
    x = np.asarray(x0, dtype=float).copy()
    u = pot(x)
    for _ in range(max_iter):
        g = pot.gradient(x)[0]
        if np.linalg.norm(g) < gtol:
            return x, u, True
        H = pot.hessian(x, exact=True)[0]
        lam, V = np.linalg.eigh(H)
        gl = V.T @ g
        floor = FLAT_MODE_TOL * max(np.max(np.abs(lam)), 1e-300)
        step = np.zeros(3)
        for k in range(3):
            if lam[k] > floor:
                step -= gl[k] / lam[k] * V[:, k]
            elif abs(gl[k]) > gtol:
                step -= math.copysign(max_step, gl[k]) * V[:, k]
        n = np.linalg.norm(step)
        if n > max_step:
            step *= max_step / n
        t = 1.0
        while True:
            x_new = x + t * step
            if x_new[2] > 0:
                u_new = pot(x_new)
                if u_new <= u + 1e-15 * abs(u):
                    break
            t *= 0.5
            if t < 1e-6:
                return x, u, bool(np.linalg.norm(step) < tol or np.linalg.norm(g) < 10 * gtol)
        x, u = x_new, u_new
        if np.linalg.norm(t * step) < tol:
            return x, u, True
    return x, u, False


# --------------------------------------------------------------------------
# secular modes


@dataclass(frozen=True)
class SecularModes:
    """Secular frequencies (rad/s) and principal axes at a local minimum.

    ``axes`` rows are the unit vectors of the (T, R, Z)-labelled modes.
    ``rotation`` is the angle (rad) from R-hat to the radial-like axis,
    positive towards Z-hat, folded into (-pi/2, pi/2].
    """

    omega_T: float
    omega_R: float
    omega_Z: float
    axes: np.ndarray
    rotation: float
    position: np.ndarray
    hessian: np.ndarray  # eV/m^2

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([self.omega_T, self.omega_R, self.omega_Z])

    @property
    def mhz(self) -> np.ndarray:
        return self.frequencies / (2 * math.pi * 1e6)


def modes_from_hessian(H: np.ndarray, site: RingSite, mass: float, position=None) -> SecularModes:
    lam, V = np.linalg.eigh(H)
    scale = max(np.max(np.abs(lam)), 1e-300)
    if lam[0] < -FLAT_MODE_TOL * scale:
        d = V[:, 0]
        raise SaddlePointError(
            f"unstable direction ({d[0]:+.3f}, {d[1]:+.3f}, {d[2]:+.3f}) with curvature {lam[0]:.3e} eV/m^2",
            d,
        )
    lam = np.where(np.abs(lam) < FLAT_MODE_TOL * scale, 0.0, lam)
    omegas = np.sqrt(lam * ct.e / mass)
    frame = site.frame  # T, R, Z
    overlap = np.abs(frame @ V)  # [label, eigvec]
    rows, cols = linear_sum_assignment(-overlap)
    order = cols[np.argsort(rows)]
    axes = V[:, order].T.copy()
    for k in range(3):
        if axes[k] @ frame[k] < 0:
            axes[k] = -axes[k]
    r_like = axes[1]
    ang = math.atan2(r_like @ site.z_hat, r_like @ site.r_hat)
    if ang <= -math.pi / 2:
        ang += math.pi
    elif ang > math.pi / 2:
        ang -= math.pi
    w = omegas[order]
    return SecularModes(float(w[0]), float(w[1]), float(w[2]), axes, ang,
                        np.asarray(position if position is not None else site.position), H)


def secular_modes(model: TrapModel, volts: Mapping[str, float] | None, site: RingSite,
                  extra: Sequence[PotentialTerm] = ()) -> SecularModes:
    """Secular frequencies at the local minimum of the total potential near ``site``."""
    pot = TrapPotential(model, volts, extra)
    x, _, ok = local_minimum(pot, site.position)
    if not ok:
        raise ConvergenceError(f"no local minimum found near {site.label}")
    H = pot.hessian(x)[0]
    return modes_from_hessian(H, site, model.species.mass, x)


# --------------------------------------------------------------------------
# trap depth


@dataclass(frozen=True)
class DepthResult:
    depth: float  # eV
    minimum: np.ndarray
    saddle: np.ndarray


def _halfplane_points(center: np.ndarray, r_grid: np.ndarray, z_grid: np.ndarray) -> np.ndarray:
    phi = math.atan2(center[1], center[0])
    R, Z = np.meshgrid(r_grid, z_grid, indexing="ij")
    return np.column_stack([(R * math.cos(phi)).ravel(), (R * math.sin(phi)).ravel(), Z.ravel()])


def barrier_flood(U: np.ndarray, start: tuple[int, int]) -> tuple[float, tuple[int, int], bool]:
    """Lowest barrier out of a 2D grid basin (priority flood).

    Returns (barrier value, index of the cell that set it, whether it was
    found strictly inside the grid).
    """
    nr, nz = U.shape
    seen = np.zeros_like(U, dtype=bool)
    heap = [(U[start], start)]
    seen[start] = True
    level, arg = U[start], start
    while heap:
        u, (i, j) = heapq.heappop(heap)
        if u > level:
            level, arg = u, (i, j)
        if i in (0, nr - 1) or j in (0, nz - 1):
            interior = arg != (i, j) or u <= U[start]
            return float(level), arg, interior and arg[0] not in (0, nr - 1) and arg[1] not in (0, nz - 1)
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if 0 <= a < nr and 0 <= b < nz and not seen[a, b]:
                seen[a, b] = True
                heapq.heappush(heap, (U[a, b], (a, b)))
    return float(level), arg, False


def _refine_saddle(pot: TrapPotential, x0: np.ndarray, phi: float, max_iter: int = 30) -> np.ndarray | None:
    """Newton iteration on the in-plane gradient starting at a grid saddle."""
    er = np.array([math.cos(phi), math.sin(phi), 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    P = np.array([er, ez])
    x = x0.copy()
    for _ in range(max_iter):
        g = P @ pot.gradient(x)[0]
        H = P @ pot.hessian(x)[0] @ P.T
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return None
        if np.linalg.norm(step) > 20e-6:
            return None
        x = x + P.T @ step
        if np.linalg.norm(step) < 1e-11:
            return x
    return None


def trap_depth(model: TrapModel, volts: Mapping[str, float] | None, site: RingSite,
               extra: Sequence[PotentialTerm] = (), half_width: float = 300e-6,
               z_range: tuple[float, float] = (10e-6, 600e-6), step: float = 3e-6,
               detail: bool = False):
    """Escape barrier (eV) from the minimum near ``site`` within its (R, Z) half-plane.

    A grid over the half-plane is flooded from the minimum in order of
    increasing energy until the boundary is reached; the highest level
    crossed is the barrier, and its cell seeds a Newton refinement of the
    saddle point.
    """
    pot = TrapPotential(model, volts, extra)
    if model.rf_drive.amplitude == 0 and VoltageSet(volts or {}).max_abs == 0 and not extra:
        res = DepthResult(0.0, np.asarray(site.position), np.asarray(site.position))
        return res if detail else 0.0
    x_min, u_min, ok = local_minimum(pot, site.position)
    if not ok:
        raise ConvergenceError(f"no confining minimum near {site.label}")
    phi = math.atan2(x_min[1], x_min[0])
    r_min = math.hypot(x_min[0], x_min[1])
    r_grid = r_min + np.arange(-half_width, half_width + step / 2, step)
    z_grid = np.arange(z_range[0], z_range[1] + step / 2, step)
    U = pot.energy(_halfplane_points(x_min, r_grid, z_grid)).reshape(len(r_grid), len(z_grid))
    start = (int(np.argmin(np.abs(r_grid - r_min))), int(np.argmin(np.abs(z_grid - x_min[2]))))
    level, (i, j), interior = barrier_flood(U, start)
    if not interior:
        raise ConvergenceError(f"no escape saddle within the search window around {site.label}")
    x_grid = np.array([r_grid[i] * math.cos(phi), r_grid[i] * math.sin(phi), z_grid[j]])
    x_s = _refine_saddle(pot, x_grid, phi)
    if x_s is None or np.linalg.norm(x_s - x_grid) > 2 * step:
        x_s, u_s = x_grid, level
    else:
        u_s = pot(x_s)
    res = DepthResult(float(u_s - u_min), x_min, x_s)
    return res if detail else res.depth
