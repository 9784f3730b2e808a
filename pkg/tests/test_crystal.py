import math

import numpy as np
import pytest
from scipy import constants as ct
from scipy.spatial import cKDTree

from ringtrap import crystal as C
from ringtrap import fields as F
from ringtrap import metrology as M


def test_single_ion_energy_reduces_to_fields(model):
    x = np.array(model.site("g09").position) + [1e-6, 0, 0]
    volts = {"e09": 0.4, "e10": -0.2}
    u = C.total_energy(model, volts, None, None, [x])
    assert u == F.rf_pseudopotential(model, x) + F.potential(model, volts, x)


def test_two_ion_coulomb_arithmetic(model):
    off = model.with_rf(amplitude=0.0)
    d = 10e-6
    x = np.array([[600e-6, 0, 80e-6], [600e-6, d, 80e-6]])
    u = C.total_energy(off, None, None, None, x)
    # e^2 / (4 pi eps0) = 1.439964547 eV nm
    assert u == pytest.approx(1.439964547e-9 / d, rel=1e-9)
    assert u == pytest.approx(ct.e / (4 * math.pi * ct.epsilon_0 * d), rel=1e-12)


def test_permutation_invariance(model):
    rng = np.random.default_rng(0)
    x = np.array(model.site("g03").position) + rng.normal(scale=20e-6, size=(6, 3))
    stray = M.StrayFieldModel(harmonics=(M.Harmonic(2, 40.0, 0.3),))
    hole = C.HolePerturbation.calibrated(model.site("g00"), model.species.mass)
    p = rng.permutation(6)
    u1 = C.total_energy(model, {"e03": 0.3}, stray, hole, x)
    u2 = C.total_energy(model, {"e03": 0.3}, stray, hole, x[p])
    assert u1 == pytest.approx(u2, rel=1e-13)
    f1 = C.forces(model, {"e03": 0.3}, stray, hole, x)
    f2 = C.forces(model, {"e03": 0.3}, stray, hole, x[p])
    assert f2 == pytest.approx(f1[p], rel=1e-12, abs=1e-12 * np.abs(f1).max())


def test_coincident_ions_rejected(model):
    x = np.array([model.site("g01").position] * 2)
    with pytest.raises(C.CrystalError):
        C.total_energy(model, None, None, None, x)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_forces_match_fd(model, seed):
    rng = np.random.default_rng(seed)
    site = model.site(f"g{seed * 7:02d}")
    x = np.array(site.position) + rng.normal(scale=15e-6, size=(5, 3))
    volts = {"e05": 0.5, "e50": -0.7}
    stray = M.StrayFieldModel(
        (M.PointCharge((site.position[0] + 50e-6, site.position[1], 10e-6), 2e-17),),
        (M.Harmonic(3, 80.0, 1.0),), model.ring_radius,
    )
    hole = C.HolePerturbation.calibrated(site, model.species.mass)
    f = C.forces(model, volts, stray, hole, x)
    h = 1e-8
    fd = np.zeros_like(x)
    for i in range(5):
        for k in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i, k] += h
            xm[i, k] -= h
            fd[i, k] = -(C.total_energy(model, volts, stray, hole, xp) - C.total_energy(model, volts, stray, hole, xm)) / (2 * h)
    assert np.linalg.norm(f - fd) <= 1e-6 * np.linalg.norm(f)


def test_newtons_third_law(model):
    x = np.array(model.site("g30").position) + np.random.default_rng(4).normal(scale=30e-6, size=(20, 3))
    pot = C.crystal_potential(model, None)
    g = pot.coulomb_gradient(x)
    assert np.linalg.norm(g.sum(axis=0)) <= 1e-10 * np.abs(g).max()


def test_single_ion_at_minimum_has_no_force(sym_model):
    x = sym_model.site("g17").position
    f = C.forces(sym_model, None, None, None, [x])
    assert np.linalg.norm(f) < C.FORCE_TOL


def test_three_ions_symmetric(sym_model, sym_ring):
    r, z = sym_ring.mean_radius, sym_ring.mean_height
    th = np.radians([0.0, 100.0, 250.0])
    start = np.column_stack([r * np.cos(th), r * np.sin(th), np.full(3, z)])
    # gradient roundoff near 1e-7 eV/m sets the floor on force_tol
    opts = C.SolverOptions(force_tol=1e-6, max_iter=500)
    cr = C.solve_crystal(sym_model, n=3, start=start, options=opts)
    assert cr.converged
    lam = np.linalg.eigvalsh(C.crystal_hessian(cr, sym_model))
    kmin = lam[lam > 1e-9 * lam.max()].min()
    # displacement allowed by the residual force along the softest non-rotational mode
    dx = math.sqrt(9) * opts.force_tol / kmin
    rep = C.spacing_report(cr)
    assert np.abs(rep.spacing - rep.circumference / 3).max() <= 2 * dx * 1e6
    assert np.abs(rep.spacing - rep.circumference / 3).max() < 1e-3 * rep.mean


def test_energy_history_monotone(ideal_crystal):
    h = np.array(ideal_crystal.energy_history)
    assert np.all(np.diff(h) <= 0)


def test_ideal_ring_spacing(ideal_crystal, sym_ring):
    assert ideal_crystal.converged and ideal_crystal.max_force < C.FORCE_TOL
    rep = C.spacing_report(ideal_crystal)
    assert rep.overall.relative_std < 1e-6
    assert rep.mean * 400 == pytest.approx(rep.circumference, rel=1e-12)
    assert rep.mean == pytest.approx(2 * math.pi * sym_ring.mean_radius * 1e6 / 400, rel=0.02)
    assert len(rep.octants) == 8 and sum(o.count for o in rep.octants) == 400


def test_ideal_ring_rotation_invariant(ideal_crystal):
    x = ideal_crystal.positions
    a = 2 * math.pi / 400
    c, s = math.cos(a), math.sin(a)
    xr = x @ np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]])
    d, _ = cKDTree(x).query(xr)
    assert d.max() < 1e-9


def test_ideal_hessian_one_soft_mode(ideal_crystal, sym_model):
    H = C.crystal_hessian(ideal_crystal, sym_model)
    lam = np.linalg.eigvalsh(H)
    scale = lam.max()
    assert lam.min() > -1e-6 * scale
    assert np.sum(lam < 1e-6 * scale) <= 1


def test_resolve_from_perturbed_start(model, ring):
    stray = M.normalize_peak(M.StrayFieldModel.random(5, ring.mean_radius), model.sites, 20.0)
    opts = C.SolverOptions(force_tol=1e-6)
    cr = C.solve_crystal(model, stray=stray, n=40, ring=ring, options=opts)
    assert cr.converged
    x1 = cr.positions + np.random.default_rng(0).uniform(-0.05e-6, 0.05e-6, cr.positions.shape)
    cr2 = C.solve_crystal(model, stray=stray, n=40, start=x1, options=opts)
    H = C.crystal_hessian(cr, model, stray=stray)
    kmin = np.linalg.eigvalsh(H)[0]
    assert kmin > 0
    # both solutions lie within the position uncertainty set by the force tolerance
    assert np.max(np.abs(cr2.positions - cr.positions)) <= 2 * 2 * opts.force_tol / kmin


def test_unconverged_is_reported(model, ring):
    cr = C.solve_crystal(model, n=20, ring=ring, seed=1,
                         stray=M.StrayFieldModel(harmonics=(M.Harmonic(1, 200.0, 0.0),)),
                         options=C.SolverOptions(max_iter=1))
    assert not cr.converged and "budget" in cr.message
    with pytest.raises(C.CrystalError):
        C.spacing_report(cr)
    with pytest.raises(C.CrystalError):
        C.ion_ion_strength(cr, model)


def test_deterministic_given_seed(model, ring):
    a = C.solve_crystal(model, n=30, ring=ring, seed=7)
    b = C.solve_crystal(model, n=30, ring=ring, seed=7)
    assert np.array_equal(a.positions, b.positions)


class Harmonic3D:
    """Isotropic harmonic well 0.5 k |x|^2 (eV)."""

    def __init__(self, k):
        self.k = k

    def energy(self, p):
        return 0.5 * self.k * np.sum(np.atleast_2d(p) ** 2, axis=1)

    def gradient(self, p):
        return self.k * np.atleast_2d(p)

    def hessian(self, p):
        return np.repeat(self.k * np.eye(3)[None], len(np.atleast_2d(p)), axis=0)


def test_two_ion_modes_sqrt3():
    mass = 40 * ct.atomic_mass
    kc = C.coulomb_constant(ct.e)
    k = mass * (2 * math.pi * 1e6) ** 2 / ct.e
    d = (2 * kc / k) ** (1 / 3)  # force balance k d/2 = kc / d^2
    pot = C.CrystalPotential(Harmonic3D(k), kc)
    x = np.array([[0, 0, -d / 2], [0, 0, d / 2]])
    assert np.max(np.abs(pot.gradient(x))) < 1e-9 * k * d
    modes = C.normal_modes(pot, x, mass)
    w1 = 2 * math.pi * 1e6
    # 2 rotations, COM in 3 directions, axial stretch
    assert modes.frequencies == pytest.approx([0, 0, w1, w1, w1, math.sqrt(3) * w1], rel=1e-9, abs=1e-6 * w1)
    stretch = modes.vectors[:, -1]
    assert abs(stretch[2]) == pytest.approx(abs(stretch[5])) and stretch[2] * stretch[5] < 0


def test_coulomb_curvature_scales_inverse_cube(model):
    x = np.array(model.site("g12").position) + np.random.default_rng(2).normal(scale=10e-6, size=(6, 3))
    pot = C.crystal_potential(model, None)
    H1 = pot.coulomb_hessian(x)
    H2 = pot.coulomb_hessian(2 * x)
    assert H2 == pytest.approx(H1 / 8, rel=1e-12, abs=1e-12 * np.abs(H1).max())


def test_strength_single_ion_matches_modes(sym_model):
    site = sym_model.site("g25")
    import ringtrap.compensation as K

    w = K.measurement_well(sym_model, site, 2 * math.pi * 0.5e6)
    x, _, _ = F.local_minimum(F.TrapPotential(sym_model, w), site.position)
    cr = C.IonCrystal(1, x[None], 0.0, 0.0, True)
    s = C.ion_ion_strength(cr, sym_model, w)[0]
    assert s == pytest.approx(F.secular_modes(sym_model, w, site).omega_T, rel=1e-3)


def test_hole_bump_calibration(model):
    site = model.site("g00")
    h = C.HolePerturbation.calibrated(site, model.species.mass)
    k = -h.curvature * ct.e
    assert math.sqrt(k / model.species.mass) == pytest.approx(2 * math.pi * 9e3, rel=1e-12)
    H = h.hessian(site.position)[0]
    assert site.t_hat @ H @ site.t_hat == pytest.approx(h.curvature, rel=1e-9)


def test_uncompensated_stray_disorders_crystal(model, ring):
    stray = M.normalize_peak(M.StrayFieldModel.random(1, ring.mean_radius), model.sites, 300.0)
    cr = C.solve_crystal(model, stray=stray, n=50, ring=ring, options=C.SolverOptions(max_iter=300))
    assert cr.converged
    assert C.spacing_report(cr).overall.relative_std > 0.10


def test_hole_alone_makes_vacancy(model, ring):
    """The calibrated bump by itself should open a gap > 2x the mean at g00."""
    hole = C.HolePerturbation.calibrated(model.site("g00"), model.species.mass)
    cr = C.solve_crystal(model, hole=hole, n=400, ring=ring)
    rep = C.spacing_report(cr)
    gap, az = rep.largest_gap()
    d = (az + math.pi) % (2 * math.pi) - math.pi
    print(f"largest gap {gap:.3f} um at {math.degrees(d):.3f} deg, mean {rep.mean:.3f} um")
    assert abs(d) < math.radians(2)
    assert gap > 2 * rep.mean
