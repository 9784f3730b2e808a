import math

import numpy as np
import pytest

from ringtrap import fields as F
from ringtrap.geometry import Electrode, Polygon, RingLayoutParams, TrapModel, build_ring_layout


def square(a=1.0, b=1.0):
    return Polygon([[-a, -b], [a, -b], [a, b], [-a, b]])


def test_square_solid_angle():
    e = Electrode("sq", (square(),))
    h = 1.0
    expected = 4 * math.atan(1 * 1 / (h * math.sqrt(1 + 1 + h * h))) / (2 * math.pi)
    assert expected == pytest.approx(1 / 3, rel=1e-15)
    assert F.unit_potential(e, [0, 0, h]) == pytest.approx(expected, rel=1e-12)


def test_unit_potential_dirichlet_and_far_field():
    e = Electrode("big", (square(1.0, 1.0),))
    assert F.unit_potential(e, [0.1, -0.2, 1e-9]) == pytest.approx(1.0, abs=1e-6)
    assert F.unit_potential(e, [0, 0, 2e6]) < 1e-9


def test_plane_is_singular(model):
    with pytest.raises(F.FieldError):
        F.potential(model, {"e01": 1.0}, [625e-6, 0, 0.0])
    with pytest.raises(F.FieldError):
        F.unit_potential(model.electrode("e01"), [625e-6, 0, -1e-6])


def test_square_axis_symmetry():
    m = TrapModel((Electrode("sq", (square(1e-3, 1e-3),)),))
    for z in (1e-5, 1e-4, 3e-3):
        E = F.e_field(m, {"sq": 1.0}, [0, 0, z])
        assert abs(E[0]) < 1e-10 and abs(E[1]) < 1e-10
        assert E[2] > 0


@pytest.fixture(scope="module")
def unshorted():
    return build_ring_layout(RingLayoutParams(shorted=()))


def random_points(rng, n):
    r = rng.uniform(300e-6, 950e-6, n)
    t = rng.uniform(0, 2 * math.pi, n)
    z = rng.uniform(20e-6, 300e-6, n)
    return np.column_stack([r * np.cos(t), r * np.sin(t), z])


def test_gapless_tiling(unshorted):
    pts = random_points(np.random.default_rng(1), 50)
    pts = np.vstack([pts, [[625e-6, 0, 1e-6], [0, 0, 5e-3], [2e-3, 1e-3, 1e-6]]])
    owners = unshorted.edge_table.owners
    all_one = {k: 1.0 for k in owners}
    assert np.max(np.abs(F.potential(unshorted, all_one, pts) - 1.0)) < 1e-9
    total = sum(F.unit_potential(e, pts) for e in unshorted.electrodes)
    gap = F.potential(unshorted, {"gap": 1.0}, pts)
    assert np.max(np.abs(total + gap - 1.0)) < 1e-9


def test_equipotential_plane(unshorted):
    pts = random_points(np.random.default_rng(2), 20)
    v0 = 3.7
    vs = {k: v0 for k in unshorted.edge_table.owners}
    assert np.max(np.abs(F.potential(unshorted, vs, pts) / v0 - 1)) < 1e-9
    assert np.max(np.abs(F.e_field(unshorted, vs, pts))) < 1e-9


def test_zero_volts(model):
    pts = random_points(np.random.default_rng(3), 5)
    assert np.all(F.potential(model, {}, pts) == 0)
    assert np.all(F.e_field(model, {}, pts) == 0)


def test_superposition(model):
    rng = np.random.default_rng(4)
    ids = model.usable_control_ids + ["rf"]
    pts = random_points(rng, 20)
    v1 = F.VoltageSet.from_vector(ids, rng.normal(size=len(ids)))
    v2 = F.VoltageSet.from_vector(ids, rng.normal(size=len(ids)))
    p12 = F.potential(model, v1 + v2, pts)
    p = F.potential(model, v1, pts) + F.potential(model, v2, pts)
    assert np.max(np.abs(p12 - p)) <= 1e-12 * np.max(np.abs(p))
    E12 = F.e_field(model, v1 + v2, pts)
    E = F.e_field(model, v1, pts) + F.e_field(model, v2, pts)
    assert np.max(np.abs(E12 - E)) <= 1e-12 * np.max(np.abs(E))
    # homogeneity
    E3 = F.e_field(model, v1 * 2.5, pts)
    assert np.max(np.abs(E3 - 2.5 * F.e_field(model, v1, pts))) <= 1e-12 * np.max(np.abs(E3))


def test_shorted_electrode_stays_grounded(model):
    p = [model.site("g22").position]
    assert F.potential(model, {"e22": 5.0}, p)[0] == 0.0
    assert F.VoltageSet({"e22": 5.0, "e01": 1.0}).pinned(model) == F.VoltageSet({"e01": 1.0})


def fd_gradient6(f, x, h):
    """Sixth-order central difference of a scalar function of (3,) x."""
    c = [(1, 45 / 60), (2, -9 / 60), (3, 1 / 60)]
    g = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[i] = sum(w * (f(x + k * e) - f(x - k * e)) for k, w in c) / h
    return g


def test_field_matches_fd_gradient(model):
    rng = np.random.default_rng(5)
    ids = model.usable_control_ids + ["rf"]
    for x in random_points(rng, 8):
        v = F.VoltageSet.from_vector(ids, rng.normal(size=len(ids)))
        E = F.e_field(model, v, x)
        g = fd_gradient6(lambda p: F.potential(model, v, p), x, 2e-6)
        assert np.linalg.norm(E + g) <= 1e-6 * np.linalg.norm(E)


def test_jacobian_matches_fd(model):
    rng = np.random.default_rng(6)
    ids = model.usable_control_ids + ["rf"]
    v = F.VoltageSet.from_vector(ids, rng.normal(size=len(ids)))
    x = random_points(rng, 1)[0]
    _, J = F.field_jacobian(model, v, x)
    c = [(1, 45 / 60), (2, -9 / 60), (3, 1 / 60)]
    h = 1e-6
    Jfd = np.column_stack([sum(w * (F.e_field(model, v, x + k * h * e) - F.e_field(model, v, x - k * h * e))
                               for k, w in c) / h for e in np.eye(3)])
    assert np.linalg.norm(J - Jfd) <= 1e-6 * np.linalg.norm(J)
    assert J == pytest.approx(J.T, abs=1e-9 * np.abs(J).max())
    assert abs(np.trace(J)) <= 1e-9 * np.abs(J).max()  # Laplace


def test_boundary_values(model):
    rng = np.random.default_rng(7)
    ids = model.usable_control_ids
    v = F.VoltageSet.from_vector(ids, rng.uniform(-5, 5, len(ids)))
    for eid in ("e03", "e50", "e89"):
        poly = model.electrode(eid).shapes[0]
        c = poly.vertices.mean(axis=0)
        # pull the centroid onto the middle of the sector
        r = 0.5 * (np.hypot(*poly.vertices.T).min() + np.hypot(*poly.vertices.T).max())
        phi = math.atan2(c[1], c[0])
        x = [r * math.cos(phi), r * math.sin(phi), 1e-9]
        assert F.potential(model, v, x) == pytest.approx(v.get(eid), rel=1e-4, abs=1e-4 * v.max_abs)
    x = [0.0, 0.0, 1e-9]
    assert F.potential(model, v, x) == pytest.approx(0.0, abs=1e-4 * v.max_abs)  # grounded centre disk


def test_pseudopotential_scaling(model):
    pts = random_points(np.random.default_rng(8), 10)
    psi = F.rf_pseudopotential(model, pts)
    assert np.all(psi >= 0)
    psi2 = F.rf_pseudopotential(model.with_rf(amplitude=160.0), pts)
    assert psi2 == pytest.approx(4 * psi, rel=1e-12)
    assert np.all(F.rf_pseudopotential(model.with_rf(amplitude=0.0), pts) == 0)


def test_pseudopotential_minimum_vs_surface(model, ring):
    for k in range(0, 88, 11):
        t, r, z = ring.azimuths[k], ring.r[k], ring.z[k]
        at_min = F.rf_pseudopotential(model, [r * math.cos(t), r * math.sin(t), z])
        below = F.rf_pseudopotential(model, [r * math.cos(t), r * math.sin(t), 1e-6])
        assert at_min < 1e-3 * below


def test_pseudopotential_gradient_fd(model):
    x = np.array(model.site("g07").position) + [3e-6, -2e-6, 5e-6]
    g = F.rf_pseudopotential_gradient(model, x)
    gfd = fd_gradient6(lambda p: F.rf_pseudopotential(model, p), x, 0.5e-6)
    assert np.linalg.norm(g - gfd) <= 1e-6 * np.linalg.norm(g)


def test_pseudopotential_rotation_invariant(sym_model):
    rng = np.random.default_rng(9)
    pts = random_points(rng, 10)
    step = 2 * math.pi / 44
    c, s = math.cos(step), math.sin(step)
    rot = pts @ np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]])
    a, b = F.rf_pseudopotential(sym_model, pts), F.rf_pseudopotential(sym_model, rot)
    assert np.max(np.abs(a - b) / a) < 1e-9


def test_symmetric_ring_is_flat(sym_ring):
    assert np.max(np.abs(sym_ring.r / sym_ring.mean_radius - 1)) < 1e-6
    assert np.max(np.abs(sym_ring.z / sym_ring.mean_height - 1)) < 1e-6
    assert np.all(sym_ring.residual < 1e-3)


def test_ring_matches_grid_search(model, ring):
    for k in (0, 30, 61):
        t = ring.azimuths[k]
        c, s = math.cos(t), math.sin(t)

        def psi(rr, zz):
            P = np.column_stack([rr.ravel() * c, rr.ravel() * s, zz.ravel()])
            return F.rf_pseudopotential(model, P).reshape(rr.shape)

        # coarse 1 um grid over a wide window, then a 0.1 um grid around its best point
        r0, z0 = 625e-6, 82e-6
        rr, zz = np.meshgrid(r0 + np.arange(-20, 20.5, 1) * 1e-6, z0 + np.arange(-20, 20.5, 1) * 1e-6, indexing="ij")
        i = np.unravel_index(np.argmin(psi(rr, zz)), rr.shape)
        rc, zc = rr[i], zz[i]
        rr, zz = np.meshgrid(rc + np.arange(-15, 15.5) * 1e-7, zc + np.arange(-15, 15.5) * 1e-7, indexing="ij")
        i = np.unravel_index(np.argmin(psi(rr, zz)), rr.shape)
        assert abs(rr[i] - ring.r[k]) <= 0.2e-6
        assert abs(zz[i] - ring.z[k]) <= 0.2e-6


def test_minimum_ring_requires_rf(base_model):
    with pytest.raises(ValueError):
        F.find_minimum_ring(base_model.with_rf(amplitude=0.0))


def test_secular_modes_flat_tangential(sym_model):
    site = sym_model.site("g11")
    md = F.secular_modes(sym_model, None, site)
    assert abs(md.omega_T) < 2 * math.pi * 5e3
    assert md.axes @ md.axes.T == pytest.approx(np.eye(3), abs=1e-12)
    assert md.omega_R > 2 * math.pi * 1e6 and md.omega_Z > 2 * math.pi * 1e6


def fd_hessian(f, x, h):
    H = np.zeros((3, 3))
    I = np.eye(3) * h
    for i in range(3):
        for j in range(3):
            H[i, j] = (f(x + I[i] + I[j]) - f(x + I[i] - I[j]) - f(x - I[i] + I[j]) + f(x - I[i] - I[j])) / (4 * h * h)
    return H


def test_hessian_matches_fd(model):
    rng = np.random.default_rng(10)
    site = model.site("g25")
    ids = model.usable_control_ids
    v = F.VoltageSet.from_vector(ids, rng.normal(scale=0.5, size=len(ids)))
    pot = F.TrapPotential(model, v)
    x = np.array(site.position) + [1e-6, 2e-6, -1e-6]
    H = pot.hessian(x)[0]
    # Richardson-extrapolated second differences
    Hfd = (4 * fd_hessian(pot, x, 0.1e-6) - fd_hessian(pot, x, 0.2e-6)) / 3
    assert np.linalg.norm(H - Hfd) <= 1e-5 * np.linalg.norm(H)


def test_gradient_matches_fd(model):
    site = model.site("g13")
    pot = F.TrapPotential(model, {"e13": 0.7, "e60": -0.3})
    x = np.array(site.position) + [2e-6, -1e-6, 3e-6]
    g = pot.gradient(x)[0]
    assert np.linalg.norm(g - fd_gradient6(pot, x, 0.5e-6)) <= 1e-6 * np.linalg.norm(g)


def test_saddle_reports_direction(model):
    site = model.site("g03")
    H = np.diag([-1e6, 5e7, 6e7])
    with pytest.raises(F.SaddlePointError) as err:
        F.modes_from_hessian(H, site, model.species.mass)
    assert abs(err.value.direction[0]) == pytest.approx(1.0)


def test_depth_zero_without_drive(model):
    assert F.trap_depth(model.with_rf(amplitude=0.0), None, model.site("g05")) == 0.0


def test_depth_grows_with_rf(model):
    site = model.site("g05")
    d80 = F.trap_depth(model, None, site)
    d60 = F.trap_depth(model.with_rf(amplitude=60.0), None, site)
    assert d80 > d60 > 0
    # pure rf: the whole energy landscape scales as V^2
    assert d60 / d80 == pytest.approx((60 / 80) ** 2, rel=1e-6)


def test_depth_against_dense_grid(model):
    """Barrier from a brute-force flood on a 2 um grid agrees with the solver."""
    site = model.site("g05")
    res = F.trap_depth(model, None, site, detail=True)
    pot = F.TrapPotential(model)
    step = 2e-6
    r = np.hypot(*res.minimum[:2])
    rg = r + np.arange(-125, 126) * step
    zg = np.arange(10, 200) * step
    RR, ZZ = np.meshgrid(rg, zg, indexing="ij")
    t = site.azimuth
    U = pot.energy(np.column_stack([RR.ravel() * math.cos(t), RR.ravel() * math.sin(t), ZZ.ravel()])).reshape(RR.shape)
    i0 = (int(np.argmin(np.abs(rg - r))), int(np.argmin(np.abs(zg - res.minimum[2]))))
    level, _, interior = F.barrier_flood(U, i0)
    assert interior
    assert res.depth == pytest.approx(level - pot(res.minimum), rel=0.02)
