"""Per-edge closed forms for planar equipotential polygons.

A polygon held at 1 V in an otherwise grounded plane produces, at a point
P above the plane, the potential Omega / (2 pi), Omega being the solid angle
the polygon subtends. Both Omega and its gradient decompose into sums over
the polygon edges, which is what makes superposition over many electrodes
cheap: every edge carries a weight (its electrode voltage) and the sums are
plain weighted reductions.

For an edge A -> B with a = A - P, b = B - P (both with z component -h):

    solid angle   2 atan( (a x b)_z / (|a||b| + a.b + h(|a| + |b|)) )
    E per volt    (a x b) (|a| + |b|) / (|a||b| (|a||b| + a.b)) / (2 pi)

The second is the Biot-Savart integral of a straight segment.
"""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2 * math.pi

# points x edges elements per chunk
_CHUNK = 1 << 18


def _chunks(n_points: int, n_edges: int):
    step = max(1, _CHUNK // max(1, n_edges))
    for i in range(0, n_points, step):
        yield slice(i, min(n_points, i + step))


def _relative(points, A, B):
    px, py, h = points[:, 0:1], points[:, 1:2], points[:, 2:3]
    ax, ay = A[None, :, 0] - px, A[None, :, 1] - py
    bx, by = B[None, :, 0] - px, B[None, :, 1] - py
    return ax, ay, bx, by, h


def potential(points: np.ndarray, A: np.ndarray, B: np.ndarray, w: np.ndarray) -> np.ndarray:
    """sum_k w_k * Omega_k / 2pi at each point; points (M, 3), A/B (K, 2)."""
    out = np.empty(len(points))
    for sl in _chunks(len(points), len(w)):
        ax, ay, bx, by, h = _relative(points[sl], A, B)
        la = np.sqrt(ax * ax + ay * ay + h * h)
        lb = np.sqrt(bx * bx + by * by + h * h)
        cz = ax * by - ay * bx
        den = la * lb + (ax * bx + ay * by + h * h) + h * (la + lb)
        out[sl] = (2.0 * np.arctan2(cz, den)) @ w / TWO_PI
    return out


def field(points, A, B, w) -> np.ndarray:
    """Electric field (per unit weight volt) at each point, shape (M, 3)."""
    out = np.empty((len(points), 3))
    for sl in _chunks(len(points), len(w)):
        ax, ay, bx, by, h = _relative(points[sl], A, B)
        la = np.sqrt(ax * ax + ay * ay + h * h)
        lb = np.sqrt(bx * bx + by * by + h * h)
        dot = ax * bx + ay * by + h * h
        g = (la + lb) / (la * lb * (la * lb + dot)) * (w / TWO_PI)
        # a x b with a_z = b_z = -h
        out[sl, 0] = (h * (by - ay) * g).sum(axis=1)
        out[sl, 1] = (h * (ax - bx) * g).sum(axis=1)
        out[sl, 2] = ((ax * by - ay * bx) * g).sum(axis=1)
    return out


def field_and_jacobian(points, A, B, w) -> tuple[np.ndarray, np.ndarray]:
    """Field (M, 3) and its Jacobian dE_i/dx_j (M, 3, 3)."""
    E = np.empty((len(points), 3))
    J = np.empty((len(points), 3, 3))
    for sl in _chunks(len(points), len(w)):
        ax, ay, bx, by, h = _relative(points[sl], A, B)
        az = -h
        la = np.sqrt(ax * ax + ay * ay + h * h)
        lb = np.sqrt(bx * bx + by * by + h * h)
        dot = ax * bx + ay * by + h * h
        s = la * lb + dot
        g = (la + lb) / (la * lb * s) * (w / TWO_PI)
        c = (h * (by - ay), h * (ax - bx), ax * by - ay * bx)
        for i in range(3):
            E[sl, i] = (c[i] * g).sum(axis=1)
        # d ln g / d(la, lb, dot)
        dA = 1.0 / (la + lb) - 1.0 / la - lb / s
        dB = 1.0 / (la + lb) - 1.0 / lb - la / s
        dC = -1.0 / s
        a = (ax, ay, az)
        b = (bx, by, az)
        # dg/dP_j = -g (dA a_j/la + dB b_j/lb + dC (a_j + b_j))
        grad_g = [
            -g * (dA * a[j] / la + dB * b[j] / lb + dC * (a[j] + b[j])) for j in range(3)
        ]
        # d(a x b)/dP_j = e_j x (a - b); a - b has zero z component
        dx, dy = ax - bx, ay - by
        # e_x x d = (0, -d_z, d_y) = (0, 0, dy); e_y x d = (d_z, 0, -d_x) = (0, 0, -dx)
        # e_z x d = (-d_y, d_x, 0)
        dcross = (
            (None, None, dy),
            (None, None, -dx),
            (-dy, dx, None),
        )
        for i in range(3):
            for j in range(3):
                term = c[i] * grad_g[j]
                if dcross[j][i] is not None:
                    term = term + dcross[j][i] * g
                J[sl, i, j] = term.sum(axis=1)
    return E, J
