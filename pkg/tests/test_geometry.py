import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from ringtrap.geometry import (
    Electrode,
    LayoutError,
    Polygon,
    RingLayoutParams,
    TrapModel,
    arc_polygon,
    build_ring_layout,
    validate,
)


def test_default_layout_counts(base_model):
    roles = [e.role for e in base_model.electrodes]
    assert roles.count("control") == 89
    assert base_model.rf_ids == ["rf"]
    assert sorted(e.id for e in base_model.electrodes if e.role == "ground") == ["gnd_inner", "gnd_outer"]
    assert sorted(base_model.shorted_ids) == ["e22", "e67", "e89"]
    assert len(base_model.usable_control_ids) == 86
    assert len(base_model.sites) == 44
    assert base_model.sites[0].label == "g00" and base_model.sites[-1].label == "g43"


def test_rf_has_two_rails(base_model):
    r = np.concatenate([np.hypot(*p.vertices.T) for p in base_model.electrode("rf").shapes])
    (a_in, a_out), (b_in, b_out) = base_model.params.rail_radii()
    assert a_out - a_in == pytest.approx(60e-6)
    assert b_in - a_out == pytest.approx(114e-6)
    radii = np.unique(np.round(r * 1e9))
    assert set(radii) == {round(x * 1e9) for x in (a_in, a_out, b_in, b_out)}


def test_hole_at_g00(base_model):
    assert base_model.has_hole
    c = base_model.hole.vertices.mean(axis=0)
    assert c == pytest.approx([625e-6, 0.0], abs=1e-9)
    assert base_model.hole.area == pytest.approx(math.pi * 5e-6**2, rel=0.02)


def test_single_segment_layout_validates():
    m = build_ring_layout(RingLayoutParams(n_segments=1, shorted=()))
    assert m.control_ids == ["e01", "e02", "e03"]
    assert validate(m).clean


def test_default_layout_validates(base_model):
    rep = validate(base_model)
    assert rep.clean, rep.problems()


def test_inner_electrode_angular_extent(base_model):
    p = base_model.params
    v = base_model.electrode("e01").shapes[0].vertices
    phi = np.arctan2(v[:, 1], v[:, 0])
    extent = phi.max() - phi.min()
    r_mid = 0.5 * sum(p.inner_radii())
    # chord of length g at r_mid subtends 2 asin(g / 2r)
    expected = 2 * math.pi / 44 - 2 * math.asin(7e-6 / (2 * r_mid))
    assert extent == pytest.approx(expected, abs=1e-6)
    # arc length of the gap at mid radius
    assert (2 * math.pi / 44 - extent) * r_mid == pytest.approx(7e-6, rel=1e-4)


def test_gaps_too_wide_rejected():
    with pytest.raises(LayoutError, match="gaps consume"):
        RingLayoutParams(n_segments=2000, gap_width=5e-6)


@pytest.mark.parametrize("kw", [dict(ring_radius=0.0), dict(gap_width=-1e-6), dict(rf_rail_width=math.nan),
                                dict(n_segments=0), dict(loading_hole_diameter=-1e-6)])
def test_bad_params_rejected(kw):
    with pytest.raises(LayoutError):
        RingLayoutParams(**kw)


def test_arc_polygon_vertex_count():
    p = arc_polygon(1.0, 2.0, 0.0, math.pi / 2, 1)
    assert len(p.vertices) == 4
    assert p.signed_area > 0


def test_arc_polygon_area_converges():
    r0, r1, t0, t1 = 1.0, 2.0, 0.3, 1.9
    p = arc_polygon(r0, r1, t0, t1, 64)
    assert len(p.vertices) == 130
    assert p.area == pytest.approx(0.5 * (r1**2 - r0**2) * (t1 - t0), rel=1e-3)


@pytest.mark.parametrize("args", [(1.0, 2.0, 0.5, 0.5, 4), (2.0, 1.0, 0.0, 1.0, 4), (0.0, 1.0, 0.0, 1.0, 4),
                                  (1.0, 2.0, 0.0, 1.0, 0), (1.0, 2.0, 0.0, 2 * math.pi, 4)])
def test_arc_polygon_degenerate(args):
    with pytest.raises(LayoutError):
        arc_polygon(*args)


def test_duplicate_electrode_reported(base_model):
    e = base_model.electrode("e05")
    dup = Electrode("dup", e.shapes)
    m = TrapModel(base_model.electrodes + (dup,))
    assert ("dup", "e05") in validate(m).overlaps


def test_clockwise_polygon_reported(base_model):
    e = base_model.electrode("e05")
    bad = Electrode("e05", (e.shapes[0].reversed(),))
    m = TrapModel(tuple(bad if x.id == "e05" else x for x in base_model.electrodes))
    rep = validate(m)
    assert rep.orientation == ["e05[0]"]
    assert not rep


def test_self_intersection_reported():
    bow = Polygon([[0, 0], [2, 2], [2, 0], [0, 1]])  # lobes of unequal area
    rep = validate(TrapModel((Electrode("x", (bow,)),)))
    assert rep.self_intersections == ["x[0]"]


def test_sites_uniform(base_model):
    az = np.array([s.azimuth for s in base_model.sites])
    assert np.max(np.abs(np.diff(az) - 2 * math.pi / 44)) < 1e-15
    for s in base_model.sites:
        F = s.frame
        assert F @ F.T == pytest.approx(np.eye(3), abs=1e-14)
        assert np.cross(s.r_hat, s.t_hat) == pytest.approx(s.z_hat, abs=1e-14)


def _vertex_set(model):
    out = []
    for e in model.electrodes:
        for p in e.shapes:
            out.append(p.vertices)
    return np.concatenate(out)


def test_rotation_symmetry_without_hole():
    m = build_ring_layout(RingLayoutParams(loading_hole_diameter=0.0))
    step = 2 * math.pi / 44
    for e in m.electrodes:
        if e.role == "control" and e.id not in ("e44", "e88", "e89"):
            k = int(e.id[1:])
            nxt = m.electrode(f"e{k + 1:02d}")
            rot = e.shapes[0].rotated(step).vertices
            assert np.max(np.abs(rot - nxt.shapes[0].vertices)) < 1e-9
    # whole vertex cloud maps onto itself within 1 nm
    v = _vertex_set(m)
    c, s = math.cos(step), math.sin(step)
    vr = v @ np.array([[c, s], [-s, c]])
    d, _ = cKDTree(v).query(vr)
    assert d.max() < 1e-9


def test_areas_tile_annulus(base_model):
    p = base_model.params
    r_g = p.outer_ground_radius
    total = sum(e.area for e in base_model.electrodes if not e.exterior)
    total += sum(g.area for g in base_model.gaps) + base_model.hole.area
    disk = next(e for e in base_model.electrodes if e.exterior).shapes[0]
    assert total == pytest.approx(disk.area, rel=1e-9)
    assert disk.area == pytest.approx(math.pi * r_g**2, rel=1e-3)
