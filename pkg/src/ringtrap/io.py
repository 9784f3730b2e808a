"""File formats: unit-labelled CSV, YAML layout/stray/config files, manifests.

Everything on disk uses explicit units in column names (``x_um``, ``E_T_V/m``,
``omega_T_MHz`` ...) and is written atomically: a temporary file in the
target directory is renamed over the destination.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import re
import tempfile
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml
from scipy import constants as ct

from .geometry import (
    CA40_MASS,
    Electrode,
    IonSpecies,
    LayoutError,
    Polygon,
    RfDrive,
    RingLayoutParams,
    RingSite,
    TrapModel,
    build_ring_layout,
    site_label,
)
from .metrology import Harmonic, PointCharge, StrayFieldModel

UM = 1e-6
FC = 1e-15


class FormatError(ValueError):
    """Malformed input file; the message points at the file, line and field."""


# --------------------------------------------------------------------------
# atomic writes and CSV


def atomic_write(path: str | os.PathLike, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def fmt(x) -> str:
    """Shortest text that reads back to the same float; ints and strings as-is."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return "" if x is None else str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(c) for c in r])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    return atomic_write(path, csv_text(header, rows))


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        rows = []
        for i, r in enumerate(reader, start=2):
            if not r:
                continue
            if len(r) != len(header):
                raise FormatError(f"{path}:{i}: expected {len(header)} fields, got {len(r)}")
            rows.append(dict(zip(header, r)))
    return header, rows


def column(rows: Sequence[Mapping[str, str]], name: str, path="<csv>") -> np.ndarray:
    out = []
    for i, r in enumerate(rows, start=2):
        if name not in r:
            raise FormatError(f"{path}: missing column {name!r}")
        try:
            out.append(float(r[name]) if r[name] != "" else math.nan)
        except ValueError:
            raise FormatError(f"{path}:{i}: field {name!r}: not a number: {r[name]!r}") from None
    return np.array(out)


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(plain(obj), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# site lists

_RANGE = re.compile(r"^g(\d+)(?:\.\.g(\d+))?$")


def parse_sites(text: str | Sequence[str], n_sites: int = 44) -> list[str]:
    """``"g00..g19,g25..g43"`` -> labels; ``"all"`` gives every site."""
    if not isinstance(text, str):
        items = list(text)
    elif text.strip() == "all":
        return [site_label(k) for k in range(n_sites)]
    else:
        items = [t.strip() for t in text.split(",") if t.strip()]
    out: list[str] = []
    for item in items:
        m = _RANGE.match(item)
        if not m:
            raise FormatError(f"bad site range {item!r} (expected gNN or gNN..gMM)")
        a = int(m.group(1))
        b = int(m.group(2)) if m.group(2) is not None else a
        if b < a or b >= n_sites:
            raise FormatError(f"site range {item!r} outside g00..{site_label(n_sites - 1)}")
        for k in range(a, b + 1):
            lab = site_label(k)
            if lab in out:
                raise FormatError(f"site {lab} listed twice")
            out.append(lab)
    if not out:
        raise FormatError("empty site list")
    return out


def format_sites(labels: Sequence[str]) -> str:
    idx = sorted(int(s[1:]) for s in labels)
    runs, start = [], None
    for i, k in enumerate(idx):
        if start is None:
            start = k
        if i + 1 == len(idx) or idx[i + 1] != k + 1:
            runs.append(site_label(start) if start == k else f"{site_label(start)}..{site_label(k)}")
            start = None
    return ",".join(runs)


# --------------------------------------------------------------------------
# YAML with line pointers


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node, deep=False):
    mapping = {}
    lines = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in mapping:
            raise FormatError(f"line {key_node.start_mark.line + 1}: duplicate key {key!r}")
        mapping[key] = loader.construct_object(value_node, deep=deep)
        lines[key] = key_node.start_mark.line + 1
    return _Doc(mapping, lines)


class _Doc(dict):
    """dict that remembers the source line of each key."""

    def __init__(self, data, lines):
        super().__init__(data)
        self.lines = lines


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def load_yaml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f":{mark.line + 1}" if mark is not None else ""
        raise FormatError(f"{path}{where}: {exc.problem}") from None
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if data is None:
        data = _Doc({}, {})
    if not isinstance(data, dict):
        raise FormatError(f"{path}: top level must be a mapping")
    return _deep_plain(data, path)


def _deep_plain(d, path, prefix=""):
    # keep the line table on nested docs but tag them with the file path
    if isinstance(d, _Doc):
        d.path = path
        d.prefix = prefix
        for k, v in d.items():
            _deep_plain(v, path, f"{prefix}{k}.")
    elif isinstance(d, list):
        for i, v in enumerate(d):
            _deep_plain(v, path, f"{prefix}{i}.")
    return d


def where(doc, key) -> str:
    path = getattr(doc, "path", "<config>")
    line = getattr(doc, "lines", {}).get(key)
    name = f"{getattr(doc, 'prefix', '')}{key}"
    return f"{path}:{line}: {name}" if line else f"{path}: {name}"


def _check_keys(doc, allowed: Iterable[str]):
    allowed = set(allowed)
    for k in doc:
        if k not in allowed:
            raise FormatError(f"{where(doc, k)}: unknown field (allowed: {', '.join(sorted(allowed))})")


def _num(doc, key, default=None, kind=float, positive=False):
    if key not in doc:
        if default is None:
            raise FormatError(f"{where(doc, key)}: required field missing")
        return default
    v = doc[key]
    try:
        if isinstance(v, bool):
            raise TypeError
        out = kind(v)
        if kind is int and out != v:
            raise TypeError
    except (TypeError, ValueError):
        raise FormatError(f"{where(doc, key)}: expected {kind.__name__}, got {v!r}") from None
    if kind is float and not math.isfinite(out):
        raise FormatError(f"{where(doc, key)}: must be finite")
    if positive and not out > 0:
        raise FormatError(f"{where(doc, key)}: must be positive")
    return out


def _sub(doc, key) -> dict:
    v = doc.get(key)
    if v is None:
        return _Doc({}, {})
    if not isinstance(v, dict):
        raise FormatError(f"{where(doc, key)}: expected a mapping")
    return v


# --------------------------------------------------------------------------
# layout files (lengths in um, angles in degrees)

_PARAM_LENGTHS = ("ring_radius", "rf_rail_width", "rf_rail_separation", "gap_width", "loading_hole_diameter",
                  "inner_control_width", "outer_control_width")


def params_to_dict(p: RingLayoutParams) -> dict:
    d = {f"{k}_um": getattr(p, k) / UM for k in _PARAM_LENGTHS}
    d.update(n_segments=p.n_segments, arc_resolution_per_deg=p.arc_resolution, hole_vertices=p.hole_vertices,
             shorted=list(p.shorted))
    return d


def params_from_dict(doc) -> RingLayoutParams:
    allowed = [f"{k}_um" for k in _PARAM_LENGTHS] + ["n_segments", "arc_resolution_per_deg", "hole_vertices",
                                                     "shorted"]
    _check_keys(doc, allowed)
    base = RingLayoutParams()
    kw = {k: _num(doc, f"{k}_um", getattr(base, k) / UM) * UM for k in _PARAM_LENGTHS}
    kw["n_segments"] = _num(doc, "n_segments", base.n_segments, int)
    kw["arc_resolution"] = _num(doc, "arc_resolution_per_deg", base.arc_resolution)
    kw["hole_vertices"] = _num(doc, "hole_vertices", base.hole_vertices, int)
    sh = doc.get("shorted", list(base.shorted))
    if not isinstance(sh, list) or not all(isinstance(s, str) for s in sh):
        raise FormatError(f"{where(doc, 'shorted')}: expected a list of electrode ids")
    kw["shorted"] = tuple(sh)
    try:
        return RingLayoutParams(**kw)
    except LayoutError as exc:
        raise FormatError(f"{getattr(doc, 'path', '<layout>')}: {exc}") from None


def rf_to_dict(rf: RfDrive) -> dict:
    return {"amplitude_V": rf.amplitude, "frequency_MHz": rf.omega / (2 * math.pi * 1e6)}


def rf_from_dict(doc) -> RfDrive:
    _check_keys(doc, ["amplitude_V", "frequency_MHz"])
    base = RfDrive()
    return RfDrive(_num(doc, "amplitude_V", base.amplitude),
                   2 * math.pi * 1e6 * _num(doc, "frequency_MHz", base.omega / (2 * math.pi * 1e6), positive=True))


def species_to_dict(s: IonSpecies) -> dict:
    return {"mass_u": s.mass / ct.atomic_mass, "charge_e": s.charge / ct.e}


def species_from_dict(doc) -> IonSpecies:
    _check_keys(doc, ["mass_u", "charge_e"])
    return IonSpecies(_num(doc, "mass_u", CA40_MASS / ct.atomic_mass, positive=True) * ct.atomic_mass,
                      _num(doc, "charge_e", 1.0) * ct.e)


def _poly_um(p: Polygon) -> list[list[float]]:
    return [[float(x) / UM, float(y) / UM] for x, y in p.vertices]


def layout_to_dict(model: TrapModel) -> dict:
    d: dict[str, Any] = {"units": {"length": "um", "angle": "deg"}}
    if model.params is not None:
        d["params"] = params_to_dict(model.params)
    d["rf"] = rf_to_dict(model.rf_drive)
    d["species"] = species_to_dict(model.species)
    d["electrodes"] = [
        {"id": e.id, "role": e.role, "shorted": e.shorted, "exterior": e.exterior,
         "shapes": [_poly_um(p) for p in e.shapes]}
        for e in model.electrodes
    ]
    d["gaps"] = [_poly_um(p) for p in model.gaps]
    d["hole"] = _poly_um(model.hole) if model.hole is not None else None
    d["sites"] = [
        {"label": s.label, "azimuth_deg": math.degrees(s.azimuth),
         "x_um": s.position[0] / UM, "y_um": s.position[1] / UM, "z_um": s.position[2] / UM}
        for s in model.sites
    ]
    return d


def plain(obj):
    """Recursively turn numpy scalars and tuples into YAML/JSON-safe values."""
    if isinstance(obj, Mapping):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def layout_text(model: TrapModel) -> str:
    return yaml.safe_dump(plain(layout_to_dict(model)), sort_keys=False, default_flow_style=None, width=120)


def _polygon(v, doc, key) -> Polygon:
    try:
        return Polygon(np.asarray(v, float) * UM)
    except (LayoutError, ValueError, TypeError) as exc:
        raise FormatError(f"{where(doc, key)}: bad polygon: {exc}") from None


def layout_from_dict(doc) -> TrapModel:
    """Layout from parameters alone, or from explicit vertex lists.

    When ``electrodes`` is present the polygons are used as given and
    ``params`` (if any) is kept as metadata only.
    """
    _check_keys(doc, ["units", "params", "rf", "species", "electrodes", "gaps", "hole", "sites"])
    units = _sub(doc, "units")
    if units and (units.get("length", "um") != "um" or units.get("angle", "deg") != "deg"):
        raise FormatError(f"{where(doc, 'units')}: only um and deg are supported")
    params = params_from_dict(_sub(doc, "params")) if "params" in doc else None
    rf = rf_from_dict(_sub(doc, "rf"))
    species = species_from_dict(_sub(doc, "species"))
    if "electrodes" not in doc:
        return build_ring_layout(params or RingLayoutParams(), rf, species)
    electrodes = []
    if not isinstance(doc["electrodes"], list):
        raise FormatError(f"{where(doc, 'electrodes')}: expected a list")
    for e in doc["electrodes"]:
        if not isinstance(e, dict):
            raise FormatError(f"{where(doc, 'electrodes')}: entries must be mappings")
        _check_keys(e, ["id", "role", "shorted", "exterior", "shapes"])
        if "id" not in e or "shapes" not in e:
            raise FormatError(f"{where(e, 'id')}: electrode needs id and shapes")
        try:
            electrodes.append(Electrode(str(e["id"]), tuple(_polygon(s, e, "shapes") for s in e["shapes"]),
                                        e.get("role", "control"), bool(e.get("shorted", False)),
                                        bool(e.get("exterior", False))))
        except LayoutError as exc:
            raise FormatError(f"{where(e, 'id')}: {exc}") from None
    gaps = tuple(_polygon(g, doc, "gaps") for g in (doc.get("gaps") or []))
    hole = _polygon(doc["hole"], doc, "hole") if doc.get("hole") is not None else None
    sites = []
    for s in doc.get("sites") or []:
        _check_keys(s, ["label", "azimuth_deg", "x_um", "y_um", "z_um"])
        sites.append(RingSite(str(s["label"]), math.radians(_num(s, "azimuth_deg")),
                              (_num(s, "x_um") * UM, _num(s, "y_um") * UM, _num(s, "z_um") * UM)))
    try:
        return TrapModel(tuple(electrodes), rf, species, tuple(sites), gaps, hole, params)
    except LayoutError as exc:
        raise FormatError(f"{getattr(doc, 'path', '<layout>')}: {exc}") from None


def load_layout(path) -> TrapModel:
    return layout_from_dict(load_yaml(path))


# --------------------------------------------------------------------------
# stray specs


def stray_to_dict(stray: StrayFieldModel) -> dict:
    return {
        "seed": stray.seed,
        "ring_radius_um": stray.ring_radius / UM,
        "charges": [
            {"x_um": c.position[0] / UM, "y_um": c.position[1] / UM, "z_um": c.position[2] / UM,
             "charge_fC": c.charge / FC}
            for c in stray.point_charges
        ],
        "harmonics": [
            {"order": h.order, "amp_V_per_m": h.amplitude, "phase_deg": math.degrees(h.phase)}
            for h in stray.harmonics
        ],
    }


def stray_text(stray: StrayFieldModel) -> str:
    return yaml.safe_dump(plain(stray_to_dict(stray)), sort_keys=False)


def stray_from_dict(doc, ring_radius: float | None = None) -> StrayFieldModel:
    """Explicit charges/harmonics plus an optional seeded ``random`` block.

    ``random`` accepts ``max_order``, ``n_harmonics`` and ``peak_V_per_m``;
    the peak is applied to the random part over the 44 nominal sites by the
    caller (it needs the trap model), see :func:`ringtrap.pipeline.build_stray`.
    """
    _check_keys(doc, ["seed", "ring_radius_um", "charges", "harmonics", "random"])
    seed = _num(doc, "seed", 0, int) if doc.get("seed") is not None else None
    R = _num(doc, "ring_radius_um", (ring_radius or 625e-6) / UM, positive=True) * UM
    charges = []
    for c in doc.get("charges") or []:
        _check_keys(c, ["x_um", "y_um", "z_um", "charge_fC"])
        try:
            charges.append(PointCharge(np.array([_num(c, "x_um"), _num(c, "y_um"), _num(c, "z_um")]) * UM,
                                       _num(c, "charge_fC") * FC))
        except ValueError as exc:
            raise FormatError(f"{where(c, 'z_um')}: {exc}") from None
    harmonics = []
    for h in doc.get("harmonics") or []:
        _check_keys(h, ["order", "amp_V_per_m", "phase_deg"])
        try:
            harmonics.append(Harmonic(_num(h, "order", kind=int), _num(h, "amp_V_per_m"),
                                      math.radians(_num(h, "phase_deg", 0.0))))
        except ValueError as exc:
            raise FormatError(f"{where(h, 'order')}: {exc}") from None
    return StrayFieldModel(tuple(charges), tuple(harmonics), R, seed)


def load_stray(path, ring_radius: float | None = None) -> tuple[StrayFieldModel, dict | None]:
    """Returns the explicit stray model and the raw ``random`` block (or None)."""
    doc = load_yaml(path)
    rnd = doc.get("random")
    if rnd is not None:
        if not isinstance(rnd, dict):
            raise FormatError(f"{where(doc, 'random')}: expected a mapping")
        _check_keys(rnd, ["max_order", "n_harmonics", "peak_V_per_m"])
    return stray_from_dict(doc, ring_radius), rnd


# --------------------------------------------------------------------------
# hashing


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=fmt)


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()
