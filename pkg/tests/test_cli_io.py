import dataclasses
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ringtrap import io as rio
from ringtrap import metrology as M
from ringtrap.cli import main
from ringtrap.geometry import RingLayoutParams, build_ring_layout
from ringtrap.pipeline import RunConfig, config_from_dict, load_config, read_fields, read_positions, run_pipeline

DATA = Path(__file__).parent / "data"

SMALL = """\
seed: 5
sites: g01..g04,g30
rf: {amplitude_V: 80.0, frequency_MHz: 52.9}
stray:
  seed: 2
  random: {max_order: 3, n_harmonics: 2, peak_V_per_m: 40.0}
hole: {enabled: false}
crystal: {enabled: true, n: 30}
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# --------------------------------------------------------------------------
# formats


def test_parse_sites_ranges():
    s = rio.parse_sites("g00..g19,g25..g43")
    assert len(s) == 39 and s[0] == "g00" and s[-1] == "g43" and "g20" not in s
    assert rio.format_sites(s) == "g00..g19,g25..g43"
    assert len(rio.parse_sites("all")) == 44


@pytest.mark.parametrize("bad", ["g05..g02", "g00..g44", "x1", "g01,g01", ""])
def test_parse_sites_rejects(bad):
    with pytest.raises(rio.FormatError):
        rio.parse_sites(bad)


def test_csv_round_trip_full_precision(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(20, 3)) * 10.0 ** rng.integers(-12, 6, size=(20, 3))
    p = rio.write_csv(tmp_path / "x.csv", ("a_V", "b_um", "c_V/m"), vals)
    _, rows = rio.read_csv(p)
    back = np.column_stack([rio.column(rows, c) for c in ("a_V", "b_um", "c_V/m")])
    assert np.array_equal(back, vals)


def test_csv_field_count_error_points_at_line(tmp_path):
    p = write(tmp_path, "f.csv", "site,E_T_V/m\ng00,1.0\ng01,2.0,3.0\n")
    with pytest.raises(rio.FormatError, match=r"f\.csv:3"):
        read_fields(p)


def test_csv_bad_number_names_field(tmp_path):
    p = write(tmp_path, "f.csv", "site,E_T_V/m\ng00,abc\n")
    with pytest.raises(rio.FormatError, match=r"f\.csv:2: field 'E_T_V/m'"):
        read_fields(p)


def test_layout_round_trip(tmp_path, base_model):
    p = rio.atomic_write(tmp_path / "layout.yaml", rio.layout_text(base_model))
    back = rio.load_layout(p)
    # the file is in um and degrees; unit conversion costs at most an ulp or two
    assert [e.id for e in back.electrodes] == [e.id for e in base_model.electrodes]
    for a, b in zip(back.electrodes, base_model.electrodes):
        assert a.shorted == b.shorted and a.role == b.role
        for pa, pb in zip(a.shapes, b.shapes):
            np.testing.assert_allclose(pa.vertices, pb.vertices, rtol=1e-15, atol=1e-20)
    np.testing.assert_allclose([s.position for s in back.sites], [s.position for s in base_model.sites],
                               rtol=1e-15)
    np.testing.assert_allclose([s.azimuth for s in back.sites], [s.azimuth for s in base_model.sites], rtol=1e-15)


def test_stray_round_trip(tmp_path):
    s = M.StrayFieldModel((M.PointCharge((1.234e-4, -5e-4, 2.5e-5), 3.2e-17),),
                          (M.Harmonic(2, 123.456, 0.789),), 6.2517e-4, 9)
    p = rio.atomic_write(tmp_path / "s.yaml", rio.stray_text(s))
    back, rnd = rio.load_stray(p)
    assert rnd is None
    x = np.array([[6e-4, 1e-4, 8e-5], [-3e-4, 5e-4, 7e-5]])
    assert back.field(x) == pytest.approx(s.field(x), rel=1e-15, abs=0)
    assert back.seed == 9


def test_yaml_unknown_field_has_line(tmp_path):
    p = write(tmp_path, "c.yaml", "seed: 1\nsolver:\n  lambda: 0.1\n  vbond: 3\n")
    with pytest.raises(rio.FormatError, match=r"c\.yaml:4: solver\.vbond: unknown field"):
        load_config(p)


def test_yaml_bad_type_has_line(tmp_path):
    p = write(tmp_path, "c.yaml", "seed: 1\ncrystal:\n  n: many\n")
    with pytest.raises(rio.FormatError, match=r"c\.yaml:3: crystal\.n: expected int"):
        load_config(p)


def test_yaml_syntax_error_has_line(tmp_path):
    p = write(tmp_path, "c.yaml", "seed: 1\nrf: {amplitude_V: 80\n")
    with pytest.raises(rio.FormatError, match=r"c\.yaml:\d+"):
        load_config(p)


def test_config_hash_tracks_content(tmp_path):
    a = config_from_dict({"seed": 1})
    assert a.config_hash() == config_from_dict({"seed": 1}).config_hash()
    # output location and thread count do not change what is computed
    assert dataclasses.replace(a, out=tmp_path, workers=8).config_hash() == a.config_hash()
    assert config_from_dict({"seed": 2}).config_hash() != a.config_hash()
    assert config_from_dict({"seed": 1, "solver": {"vbound": 5.0}}).config_hash() != a.config_hash()
    assert config_from_dict({"seed": 1, "sites": "g00..g10"}).config_hash() != a.config_hash()
    assert config_from_dict({"seed": 1, "rf": {"amplitude_V": 81.0, "frequency_MHz": 52.9}}).config_hash() \
        != a.config_hash()


def test_config_hash_follows_layout_file_content(tmp_path):
    p = rio.atomic_write(tmp_path / "l.yaml", rio.layout_text(build_ring_layout()))
    h1 = RunConfig(layout_path=p).config_hash()
    p2 = rio.atomic_write(tmp_path / "l2.yaml", p.read_text())
    assert RunConfig(layout_path=p2).config_hash() == h1
    rio.atomic_write(p2, rio.layout_text(build_ring_layout(RingLayoutParams(gap_width=6e-6))))
    assert RunConfig(layout_path=p2).config_hash() != h1


def test_atomic_write_leaves_no_temp(tmp_path):
    rio.atomic_write(tmp_path / "a.txt", "x")
    rio.atomic_write(tmp_path / "a.txt", "y")
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]
    assert (tmp_path / "a.txt").read_text() == "y"


# --------------------------------------------------------------------------
# command line


def test_unknown_flag_is_usage_error(capsys):
    assert main(["modes", "--bogus"]) == 1
    assert "unrecognized arguments" in capsys.readouterr().err


def test_bad_site_is_usage_error(tmp_path, capsys):
    assert main(["modes", "--site", "g99", "--out", str(tmp_path)]) == 1
    assert "g99" in capsys.readouterr().err


def test_malformed_config_points_at_line(tmp_path, capsys):
    p = write(tmp_path, "c.yaml", "seed: 1\nmeasurement:\n  alphas: [1, -2]\n")
    assert main(["loop", "--config", str(p)]) == 1
    assert "c.yaml:3: measurement.alphas" in capsys.readouterr().err


def test_missing_file_is_usage_error(tmp_path, capsys):
    assert main(["compensate", "--measured", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 1
    assert "nope.csv" in capsys.readouterr().err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "ringtrap", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("layout", "field", "modes", "crystal", "measure", "compensate", "loop"):
        assert cmd in r.stdout


def test_layout_export(tmp_path):
    assert main(["layout", "export", "--out", str(tmp_path)]) == 0
    m = rio.load_layout(tmp_path / "layout.yaml")
    assert len(m.usable_control_ids) == 86
    assert main(["layout", "validate", "--layout", str(tmp_path / "layout.yaml"), "--out", str(tmp_path)]) == 0


def test_field_map(tmp_path):
    assert main(["field", "map", "--x", "0", "--y", "625", "--z", "40:140:6", "--out", str(tmp_path)]) == 0
    h, rows = rio.read_csv(tmp_path / "field_map.csv")
    assert len(rows) == 6 and "pseudo_eV" in h
    pp = rio.column(rows, "pseudo_eV")
    assert np.argmin(pp) == 2  # z = 80 um is the grid point nearest the null


def test_modes_g25(tmp_path, capsys):
    assert main(["modes", "--site", "g25", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("g25: omega_T") and "MHz" in out
    h, rows = rio.read_csv(tmp_path / "modes.csv")
    assert h[:4] == ["site", "omega_T_MHz", "omega_R_MHz", "omega_Z_MHz"]
    r = rows[0]
    assert float(r["omega_R_MHz"]) == pytest.approx(2.12, rel=0.15)
    assert float(r["omega_Z_MHz"]) == pytest.approx(2.17, rel=0.15)


def test_measure_39_sites(tmp_path):
    assert main(["measure", "--sites", "g00..g19,g25..g43", "--out", str(tmp_path)]) == 0
    recs = json.loads((tmp_path / "measurements.json").read_text())
    assert len(recs) == 39 and all(r is not None for r in recs.values())
    fields = read_fields(tmp_path / "fields.csv")
    assert list(fields) == rio.parse_sites("g00..g19,g25..g43")
    # no stray given: every estimate is zero
    assert max(abs(f.E_T) for f in fields.values()) < 1e-6


def test_crystal_solve_400(tmp_path):
    assert main(["crystal", "solve", "--n", "400", "--out", str(tmp_path)]) == 0
    pos = read_positions(tmp_path / "crystal.csv")
    assert pos.shape == (400, 3)
    assert main(["crystal", "report", "--positions", str(tmp_path / "crystal.csv"),
                 "--out", str(tmp_path / "r")]) == 0
    _, rows = rio.read_csv(tmp_path / "r" / "spacing.csv")
    assert len(rows) == 400


def test_compensate_zero_stray(tmp_path):
    fields = tmp_path / "fields.csv"
    rio.write_csv(fields, ("site", "E_T_V/m", "sigma_V/m"),
                  [(s, 0.0, 0.1) for s in rio.parse_sites("g00..g19,g25..g43")])
    assert main(["compensate", "--measured", str(fields), "--out", str(tmp_path)]) == 0
    _, rows = rio.read_csv(tmp_path / "compensation.csv")
    assert len(rows) == 86
    assert np.abs(rio.column(rows, "delta_V")).max() < 1e-9


def test_compensate_with_response_file(tmp_path):
    assert main(["response", "--out", str(tmp_path)]) == 0
    fields = tmp_path / "fields.csv"
    rio.write_csv(fields, ("site", "E_T_V/m"), [(f"g{k:02d}", 10.0 * math.cos(2 * math.pi * k / 44))
                                                for k in range(44) if not 20 <= k <= 24])
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["compensate", "--measured", str(fields), "--response", str(tmp_path / "response.csv"),
                 "--out", str(a)]) == 0
    assert main(["compensate", "--measured", str(fields), "--out", str(b)]) == 0
    assert (a / "compensation.csv").read_bytes() == (b / "compensation.csv").read_bytes()


def test_zero_stray_pipeline(tmp_path):
    cfg = config_from_dict({"sites": "g01..g03,g30", "stray": {"harmonics": [], "charges": []},
                            "hole": {"enabled": False}, "crystal": {"enabled": False}})
    res = run_pipeline(dataclasses.replace(cfg, out=tmp_path))
    assert res.status == 0
    _, rows = rio.read_csv(tmp_path / "compensation.csv")
    assert np.abs(rio.column(rows, "delta_V")).max() < 1e-9


def test_runs_are_byte_identical(tmp_path):
    cfg = write(tmp_path, "small.yaml", SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["loop", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["loop", "--config", str(cfg), "--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    assert {"layout.yaml", "ring.csv", "measurements_before.json", "compensation.csv", "suppression.csv",
            "crystal.csv", "spacing.csv", "manifest.json"} <= set(names)
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_thread_count_does_not_change_output(tmp_path, monkeypatch):
    cfg = write(tmp_path, "small.yaml", SMALL.replace("enabled: true, n: 30", "enabled: false"))
    a, b = tmp_path / "a", tmp_path / "b"
    monkeypatch.setenv("RINGTRAP_THREADS", "1")
    assert main(["loop", "--config", str(cfg), "--out", str(a)]) == 0
    monkeypatch.setenv("RINGTRAP_THREADS", "4")
    assert main(["loop", "--config", str(cfg), "--out", str(b)]) == 0
    for n in ("measurements_before.json", "measurements_after.json", "suppression.csv", "manifest.json"):
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_failed_stage_marked(tmp_path):
    cfg = config_from_dict({"sites": "g01", "stray": {"harmonics": [{"order": 1, "amp_V_per_m": 1e6}]},
                            "hole": {"enabled": False}, "crystal": {"enabled": False}})
    res = run_pipeline(dataclasses.replace(cfg, out=tmp_path))
    assert res.status == 2
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["status"] == "FAILED" and man["failed_stage"] == "compensate"
    assert (tmp_path / "ring.csv").exists()


# --------------------------------------------------------------------------
# bundled demo


def test_demo_completes(demo_run):
    assert demo_run.status == 0
    s = demo_run.summary
    assert s["spacing_rel_std_outside_excluded"] < 0.05
    assert demo_run.manifest["status"] == "ok"


def test_demo_suppression_golden(demo_run):
    got = (demo_run.out / "suppression.csv").read_bytes()
    assert got == (DATA / "demo_suppression.csv").read_bytes()
