"""Planar electrode layout of the ring trap and the g-site coordinate system.

All lengths are SI (meters) internally. The layout is a set of polygons in
the z = 0 plane; everything not covered by an electrode polygon is either a
gap strip (grounded), the loading hole (grounded) or the outer ground plane,
which is modelled as the complement of a disk.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy import constants as ct

# Ca-40 atomic mass (AME2020) minus one electron.
CA40_MASS = 39.962590851 * ct.atomic_mass - ct.m_e

CONTROL, RF, GROUND = "control", "rf", "ground"


class LayoutError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Polygon:
    """Closed planar polygon, vertices as an (n, 2) array in meters.

    The closing edge from the last vertex back to the first is implicit.
    Orientation and simplicity are checked by :func:`validate`, not here,
    so that deliberately broken polygons can still be constructed.
    """

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise LayoutError("polygon needs at least 3 (x, y) vertices")
        if not np.all(np.isfinite(v)):
            raise LayoutError("polygon vertices must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def signed_area(self) -> float:
        x, y = self.vertices.T
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    @property
    def area(self) -> float:
        return abs(self.signed_area)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        v = self.vertices
        return v, np.roll(v, -1, axis=0)

    def rotated(self, angle: float) -> "Polygon":
        c, s = math.cos(angle), math.sin(angle)
        return Polygon(self.vertices @ np.array([[c, s], [-s, c]]))

    def reversed(self) -> "Polygon":
        return Polygon(self.vertices[::-1])


@dataclass(frozen=True, eq=False)
class Electrode:
    """A conductor made of one or more polygons held at a common voltage.

    ``exterior=True`` means the electrode covers the whole plane *outside*
    its polygons (used for the outer ground plane).
    """

    id: str
    shapes: tuple[Polygon, ...]
    role: str = CONTROL
    shorted: bool = False
    exterior: bool = False

    def __post_init__(self):
        if self.role not in (CONTROL, RF, GROUND):
            raise LayoutError(f"unknown electrode role {self.role!r}")
        object.__setattr__(self, "shapes", tuple(self.shapes))

    @property
    def area(self) -> float:
        return sum(p.area for p in self.shapes)


@dataclass(frozen=True)
class RingLayoutParams:
    """Parameters of the ring layout.

    ``rf_rail_separation`` is the metal edge-to-edge distance between the two
    rf rails. Its default is an effective value for the gapless-plane model:
    with the as-drawn 134 um the model null sits near 93 um instead of the
    82 um of the reference design, so the default is chosen to put the null
    at 82 um. Pass ``rf_rail_separation=134e-6`` for the as-drawn layout.
    """

    ring_radius: float = 625e-6
    n_segments: int = 44
    rf_rail_width: float = 60e-6
    rf_rail_separation: float = 114e-6
    gap_width: float = 7e-6
    loading_hole_diameter: float = 10e-6
    inner_control_width: float = 150e-6
    outer_control_width: float = 150e-6
    arc_resolution: float = 1.0  # vertices per degree of arc
    hole_vertices: int = 32
    shorted: tuple[str, ...] = ("e22", "e67", "e89")

    def __post_init__(self):
        lengths = {
            "ring_radius": self.ring_radius,
            "rf_rail_width": self.rf_rail_width,
            "rf_rail_separation": self.rf_rail_separation,
            "gap_width": self.gap_width,
            "inner_control_width": self.inner_control_width,
            "outer_control_width": self.outer_control_width,
        }
        for name, value in lengths.items():
            if not (value > 0 and math.isfinite(value)):
                raise LayoutError(f"{name} must be positive, got {value!r}")
        if self.loading_hole_diameter < 0:
            raise LayoutError("loading_hole_diameter must be >= 0")
        if self.n_segments < 1:
            raise LayoutError("n_segments must be >= 1")
        if self.arc_resolution <= 0:
            raise LayoutError("arc_resolution must be positive")
        if self.rf_rail_separation <= 2 * self.gap_width:
            raise LayoutError("rf rails too close: no room for the centre electrode")
        if self.inner_radii()[0] <= 0:
            raise LayoutError("inner control ring extends past the trap centre")
        pitch = 2 * math.pi / self.n_segments
        for name, r_mid in (("inner", self.inner_mid_radius), ("outer", self.outer_mid_radius)):
            if self.gap_width / r_mid >= pitch:
                raise LayoutError(f"gaps consume the entire {name} control electrodes")
        if self.hole_radius > 0:
            r_in, r_out = self.center_electrode_radii()
            if not (r_in < self.ring_radius - self.hole_radius and self.ring_radius + self.hole_radius < r_out):
                raise LayoutError("loading hole does not fit inside the centre electrode")

    @property
    def hole_radius(self) -> float:
        return 0.5 * self.loading_hole_diameter

    def rail_radii(self) -> tuple[tuple[float, float], tuple[float, float]]:
        r0, c, w = self.ring_radius, 0.5 * self.rf_rail_separation, self.rf_rail_width
        return (r0 - c - w, r0 - c), (r0 + c, r0 + c + w)

    def center_electrode_radii(self) -> tuple[float, float]:
        c = 0.5 * self.rf_rail_separation
        return self.ring_radius - c + self.gap_width, self.ring_radius + c - self.gap_width

    def inner_radii(self) -> tuple[float, float]:
        r_out = self.rail_radii()[0][0] - self.gap_width
        return r_out - self.inner_control_width, r_out

    def outer_radii(self) -> tuple[float, float]:
        r_in = self.rail_radii()[1][1] + self.gap_width
        return r_in, r_in + self.outer_control_width

    @property
    def inner_mid_radius(self) -> float:
        return float(np.mean(self.inner_radii()))

    @property
    def outer_mid_radius(self) -> float:
        return float(np.mean(self.outer_radii()))

    @property
    def inner_ground_radius(self) -> float:
        return self.inner_radii()[0] - self.gap_width

    @property
    def outer_ground_radius(self) -> float:
        return self.outer_radii()[1] + self.gap_width


@dataclass(frozen=True)
class RfDrive:
    amplitude: float = 80.0
    omega: float = 2 * math.pi * 52.9e6

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("rf amplitude must be >= 0")
        if self.omega <= 0:
            raise ValueError("rf angular frequency must be > 0")


@dataclass(frozen=True)
class IonSpecies:
    mass: float = CA40_MASS
    charge: float = ct.e

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("ion mass must be > 0")
        if self.charge == 0:
            raise ValueError("ion charge must be nonzero")

    @property
    def charge_number(self) -> float:
        return self.charge / ct.e


@dataclass(frozen=True, eq=False)
class RingSite:
    """Trapping site ``gNN`` with its local (R, T, Z) frame."""

    label: str
    azimuth: float
    position: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "position", p)

    @property
    def index(self) -> int:
        return int(self.label[1:])

    @property
    def r_hat(self) -> np.ndarray:
        return np.array([math.cos(self.azimuth), math.sin(self.azimuth), 0.0])

    @property
    def t_hat(self) -> np.ndarray:
        return np.array([-math.sin(self.azimuth), math.cos(self.azimuth), 0.0])

    @property
    def z_hat(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])

    @property
    def frame(self) -> np.ndarray:
        """Rows are (T, R, Z) unit vectors."""
        return np.array([self.t_hat, self.r_hat, self.z_hat])

    def moved_to(self, position) -> "RingSite":
        return RingSite(self.label, self.azimuth, position)


def site_label(k: int) -> str:
    return f"g{k:02d}"


def electrode_label(k: int) -> str:
    return f"e{k:02d}"


@dataclass(frozen=True, eq=False)
class TrapModel:
    electrodes: tuple[Electrode, ...]
    rf_drive: RfDrive = field(default_factory=RfDrive)
    species: IonSpecies = field(default_factory=IonSpecies)
    sites: tuple[RingSite, ...] = ()
    gaps: tuple[Polygon, ...] = ()
    hole: Polygon | None = None
    params: RingLayoutParams | None = None

    def __post_init__(self):
        object.__setattr__(self, "electrodes", tuple(self.electrodes))
        object.__setattr__(self, "sites", tuple(self.sites))
        object.__setattr__(self, "gaps", tuple(self.gaps))
        ids = [e.id for e in self.electrodes]
        if len(set(ids)) != len(ids):
            raise LayoutError("duplicate electrode ids")

    @cached_property
    def _by_id(self) -> dict[str, Electrode]:
        return {e.id: e for e in self.electrodes}

    def electrode(self, id: str) -> Electrode:
        try:
            return self._by_id[id]
        except KeyError:
            raise KeyError(f"no electrode {id!r}") from None

    @cached_property
    def edge_table(self) -> "EdgeTable":
        return EdgeTable.from_model(self)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.electrodes]

    @property
    def rf_ids(self) -> list[str]:
        return [e.id for e in self.electrodes if e.role == RF]

    @property
    def control_ids(self) -> list[str]:
        return [e.id for e in self.electrodes if e.role == CONTROL]

    @property
    def usable_control_ids(self) -> list[str]:
        return [e.id for e in self.electrodes if e.role == CONTROL and not e.shorted]

    @property
    def shorted_ids(self) -> list[str]:
        return [e.id for e in self.electrodes if e.shorted]

    def site(self, label: str) -> RingSite:
        for s in self.sites:
            if s.label == label:
                return s
        raise KeyError(f"no site {label!r}")

    @property
    def ring_radius(self) -> float:
        """Mean radius of the site positions."""
        return float(np.mean([math.hypot(*s.position[:2]) for s in self.sites]))

    @property
    def has_hole(self) -> bool:
        return self.hole is not None

    def with_sites(self, sites: Iterable[RingSite]) -> "TrapModel":
        return dataclasses.replace(self, sites=tuple(sites))

    def with_rf(self, amplitude: float | None = None, omega: float | None = None) -> "TrapModel":
        drive = RfDrive(
            self.rf_drive.amplitude if amplitude is None else amplitude,
            self.rf_drive.omega if omega is None else omega,
        )
        return dataclasses.replace(self, rf_drive=drive)


GAP = "gap"


@dataclass(frozen=True, eq=False)
class EdgeTable:
    """All polygon edges of a model, flattened for the field kernels.

    ``owner[k]`` indexes ``owners`` (electrode ids followed by ``"gap"``, which
    covers the gap strips and the loading hole). ``sign`` is -1 on edges of
    exterior electrodes, whose unit potential is ``1 - sum``; ``constant``
    holds that 1 per owner.
    """

    A: np.ndarray
    B: np.ndarray
    owner: np.ndarray
    sign: np.ndarray
    owners: tuple[str, ...]
    constant: np.ndarray

    @classmethod
    def from_model(cls, model: "TrapModel") -> "EdgeTable":
        A, B, owner, sign = [], [], [], []
        owners = [e.id for e in model.electrodes] + [GAP]
        constant = np.zeros(len(owners))
        groups = [(e.shapes, e.exterior) for e in model.electrodes]
        groups.append((model.gaps + ((model.hole,) if model.hole is not None else ()), False))
        for i, (shapes, exterior) in enumerate(groups):
            if exterior:
                constant[i] = 1.0
            for poly in shapes:
                a, b = poly.edges()
                A.append(a)
                B.append(b)
                owner.append(np.full(len(a), i))
                sign.append(np.full(len(a), -1.0 if exterior else 1.0))
        return cls(
            np.concatenate(A), np.concatenate(B), np.concatenate(owner),
            np.concatenate(sign), tuple(owners), constant,
        )

    def index(self, id: str) -> int:
        try:
            return self.owners.index(id)
        except ValueError:
            raise KeyError(f"no electrode {id!r}") from None

    def select(self, owner_volts: np.ndarray):
        """Edges with nonzero weight for per-owner voltages: (A, B, w, offset)."""
        w = owner_volts[self.owner] * self.sign
        keep = w != 0
        return self.A[keep], self.B[keep], w[keep], float(owner_volts @ self.constant)


# --------------------------------------------------------------------------
# construction


def _arc(r: float, thetas: np.ndarray) -> np.ndarray:
    # Angles are reduced mod 2*pi so that 0 and 2*pi give bit-identical vertices.
    t = np.mod(thetas, 2 * math.pi)
    return np.column_stack([r * np.cos(t), r * np.sin(t)])


def arc_polygon(r_in: float, r_out: float, theta0: float, theta1: float, n: int) -> Polygon:
    """Annular sector with ``n`` chords on each arc (2(n+1) vertices, CCW)."""
    if not (r_out > r_in > 0):
        raise LayoutError(f"need r_out > r_in > 0, got r_in={r_in!r}, r_out={r_out!r}")
    if not theta1 > theta0:
        raise LayoutError("need theta1 > theta0")
    if theta1 - theta0 >= 2 * math.pi:
        raise LayoutError("sector must span less than a full turn")
    if n < 1:
        raise LayoutError("need at least one chord per arc")
    t = np.linspace(theta0, theta1, n + 1)
    return _sector(r_in, r_out, t)


def _sector(r_in: float, r_out: float, thetas: np.ndarray) -> Polygon:
    return Polygon(np.vstack([_arc(r_out, thetas), _arc(r_in, thetas[::-1])]))


class _AngleGrid:
    """Shared angular breakpoints so that abutting arcs have identical vertices."""

    def __init__(self, params: RingLayoutParams):
        n = params.n_segments
        self.pitch = 2 * math.pi / n
        n_sub = max(1, math.ceil(math.degrees(self.pitch) * params.arc_resolution))
        self.gamma_in = params.gap_width / params.inner_mid_radius
        self.gamma_out = params.gap_width / params.outer_mid_radius
        frac = set(np.linspace(0.0, 1.0, n_sub + 1))
        for g in (self.gamma_in, self.gamma_out):
            frac.update({0.5 * g / self.pitch, 1 - 0.5 * g / self.pitch})
        self.frac = np.array(sorted(frac))
        self.n = n
        self.grid = np.concatenate(
            [k * self.pitch + self.pitch * self.frac[:-1] for k in range(n)] + [[2 * math.pi]]
        )

    def span(self, t0: float, t1: float) -> np.ndarray:
        """Grid angles in [t0, t1]; endpoints are snapped onto the grid."""
        base = self.grid[:-1]
        g = np.concatenate([base - 2 * math.pi, base, base + 2 * math.pi, [4 * math.pi]])
        t0, t1 = self._snap(g, t0), self._snap(g, t1)
        inner = g[(g > t0) & (g < t1)]
        return np.concatenate([[t0], inner, [t1]])

    @staticmethod
    def _snap(g: np.ndarray, t: float, tol: float = 1e-12) -> float:
        i = int(np.argmin(np.abs(g - t)))
        return float(g[i]) if abs(g[i] - t) < tol else t

    def pitch_span(self, k: int) -> np.ndarray:
        return self.span(k * self.pitch, (k + 1) * self.pitch)


def _ring_spans(grid: _AngleGrid) -> list[np.ndarray]:
    spans = [grid.pitch_span(k) for k in range(grid.n)]
    if grid.n == 1:
        # a single full-turn sector would touch itself along the seam
        t = spans[0]
        mid = len(t) // 2
        spans = [t[: mid + 1], t[mid:]]
    return spans


def _ring_sectors(grid: _AngleGrid, r_in: float, r_out: float) -> list[Polygon]:
    return [_sector(r_in, r_out, t) for t in _ring_spans(grid)]


def _disk(grid: _AngleGrid, r: float) -> Polygon:
    return Polygon(_arc(r, grid.grid[:-1]))


def _dedupe(v: np.ndarray) -> np.ndarray:
    keep = np.ones(len(v), dtype=bool)
    keep[1:] = np.any(v[1:] != v[:-1], axis=1)
    if np.all(v[-1] == v[0]) and len(v) > 1:
        keep[-1] = False
    return v[keep]


def build_ring_layout(
    params: RingLayoutParams | None = None,
    rf_drive: RfDrive | None = None,
    species: IonSpecies | None = None,
) -> TrapModel:
    """Build the ring trap: 2N+1 control electrodes, rf rails, grounds and gaps.

    Control electrode numbering: e01..eN inner ring, e(N+1)..e(2N) outer ring,
    e(2N+1) the centre electrode under the trapping volume. Inner electrode
    e(k+1) spans the pitch between sites gk and g(k+1). Site gk sits on the
    radial gap bisector at azimuth k * 2pi/N; g00 is the loading hole.
    Site positions are placeholders at the nominal radius and height until
    refined by :func:`ringtrap.fields.find_minimum_ring`.
    """
    p = params or RingLayoutParams()
    grid = _AngleGrid(p)
    n, g = p.n_segments, p.gap_width
    pitch = grid.pitch
    shorted = set(p.shorted)

    electrodes: list[Electrode] = []
    gaps: list[Polygon] = []

    def control_ring(r_in, r_out, gamma, first_index):
        for k in range(n):
            t = grid.span(k * pitch + 0.5 * gamma, (k + 1) * pitch - 0.5 * gamma)
            eid = electrode_label(first_index + k)
            electrodes.append(
                Electrode(eid, (_sector(r_in, r_out, t),), CONTROL, shorted=eid in shorted)
            )
            gaps.append(_sector(r_in, r_out, grid.span(k * pitch - 0.5 * gamma, k * pitch + 0.5 * gamma)))

    (ri_in, ri_out), (ro_in, ro_out) = p.inner_radii(), p.outer_radii()
    control_ring(ri_in, ri_out, grid.gamma_in, 1)
    control_ring(ro_in, ro_out, grid.gamma_out, n + 1)

    c_in, c_out = p.center_electrode_radii()
    center_sectors = _ring_sectors(grid, c_in, c_out)
    hole = None
    if p.hole_radius > 0:
        first, last, hole = _hole_pieces(grid, c_in, c_out, p.hole_radius, p.ring_radius, p.hole_vertices)
        center_sectors[0], center_sectors[-1] = first, last
    cid = electrode_label(2 * n + 1)
    electrodes.append(Electrode(cid, tuple(center_sectors), CONTROL, shorted=cid in shorted))

    (a_in, a_out), (b_in, b_out) = p.rail_radii()
    electrodes.append(
        Electrode("rf", tuple(_ring_sectors(grid, a_in, a_out) + _ring_sectors(grid, b_in, b_out)), RF)
    )
    electrodes.append(Electrode("gnd_inner", (_disk(grid, p.inner_ground_radius),), GROUND))
    electrodes.append(
        Electrode("gnd_outer", (_disk(grid, p.outer_ground_radius),), GROUND, exterior=True)
    )

    for r_in, r_out in (
        (p.inner_ground_radius, ri_in),
        (ri_out, a_in),
        (a_out, c_in),
        (c_out, b_in),
        (b_out, ro_in),
        (ro_out, p.outer_ground_radius),
    ):
        gaps.extend(_ring_sectors(grid, r_in, r_out))

    # nominal site positions, refined later
    h0 = math.sqrt(0.5 * p.rf_rail_separation * (0.5 * p.rf_rail_separation + p.rf_rail_width))
    sites = []
    for k in range(n):
        t = k * pitch
        sites.append(RingSite(site_label(k), t, (p.ring_radius * math.cos(t), p.ring_radius * math.sin(t), h0)))

    return TrapModel(
        electrodes=tuple(electrodes),
        rf_drive=rf_drive or RfDrive(),
        species=species or IonSpecies(),
        sites=tuple(sites),
        gaps=tuple(gaps),
        hole=hole,
        params=p,
    )


def _hole_pieces(grid, r_in, r_out, hole_r, r_hole, n_hole):
    """Centre-electrode sectors adjacent to azimuth 0 with half-disk notches, and the hole."""
    half = max(2, n_hole // 2)
    phi = np.linspace(math.pi, 0.0, half + 1)
    # upper semicircle walked from (r_hole - a, 0) to (r_hole + a, 0)
    upper = np.column_stack([r_hole + hole_r * np.cos(phi), hole_r * np.sin(phi)])
    upper[0, 1] = upper[-1, 1] = 0.0
    lower = upper * np.array([1.0, -1.0])

    spans = _ring_spans(grid)
    # first sector: outer arc from azimuth 0, inner arc back, then up the x axis through the notch
    t0 = spans[0]
    first = np.vstack([_arc(r_out, t0), _arc(r_in, t0[::-1]), upper])
    # sector N-1: outer arc ends on the x axis; walk down the axis through the notch
    t1 = spans[-1]
    last = np.vstack([_arc(r_out, t1), lower[::-1], _arc(r_in, t1[::-1])])
    hole_poly = np.vstack([lower[:-1], upper[::-1][:-1]])
    return Polygon(_dedupe(first)), Polygon(_dedupe(last)), Polygon(hole_poly)


# --------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    self_intersections: list[str] = field(default_factory=list)
    overlaps: list[tuple[str, str]] = field(default_factory=list)
    orientation: list[str] = field(default_factory=list)
    degenerate: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (self.self_intersections or self.overlaps or self.orientation or self.degenerate)

    def problems(self) -> list[str]:
        out = [f"self-intersecting: {s}" for s in self.self_intersections]
        out += [f"overlap: {a} / {b}" for a, b in self.overlaps]
        out += [f"clockwise: {s}" for s in self.orientation]
        out += [f"zero area: {s}" for s in self.degenerate]
        return out

    def __bool__(self) -> bool:
        return self.clean


def validate(model: TrapModel, area_tol: float = 1e-18) -> ValidationReport:
    """Check polygon simplicity, orientation and inter-electrode overlaps.

    ``area_tol`` is in m^2 (1e-18 m^2 = 1e-6 um^2); shared boundaries have
    zero intersection area and are not reported.
    """
    import shapely
    from shapely.geometry import LinearRing
    from shapely.geometry import Polygon as SPolygon
    from shapely.strtree import STRtree

    report = ValidationReport()
    owners: list[str] = []
    shapes: list[SPolygon] = []
    exterior_shapes: list[tuple[str, SPolygon]] = []
    for e in model.electrodes:
        for i, poly in enumerate(e.shapes):
            name = f"{e.id}[{i}]"
            if poly.signed_area == 0:
                report.degenerate.append(name)
                continue
            if not LinearRing(poly.vertices).is_simple:
                report.self_intersections.append(name)
            if poly.signed_area < 0:
                report.orientation.append(name)
            sp = shapely.make_valid(SPolygon(poly.vertices)) if not SPolygon(poly.vertices).is_valid else SPolygon(poly.vertices)
            if e.exterior:
                exterior_shapes.append((e.id, sp))
            else:
                owners.append(e.id)
                shapes.append(sp)

    tree = STRtree(shapes)
    seen: set[tuple[str, str]] = set()
    for i, sp in enumerate(shapes):
        for j in tree.query(sp):
            j = int(j)
            if j <= i or owners[i] == owners[j]:
                continue
            if sp.intersection(shapes[j]).area > area_tol:
                pair = tuple(sorted((owners[i], owners[j])))
                if pair not in seen:
                    seen.add(pair)
                    report.overlaps.append(pair)
    for ext_id, boundary in exterior_shapes:
        for i, sp in enumerate(shapes):
            if owners[i] != ext_id and sp.difference(boundary).area > area_tol:
                pair = tuple(sorted((owners[i], ext_id)))
                if pair not in seen:
                    seen.add(pair)
                    report.overlaps.append(pair)
    return report
