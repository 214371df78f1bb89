"""Serialization round-trips, NIfTI ingestion, synthetic spheres, exports."""

import json
import struct

import numpy as np
import pytest

from _fixtures import build_nifti_bytes
from romt.data_io import (
    SphereSynthConfig,
    UnsupportedFormatError,
    VolumeFormatError,
    export_pathlines,
    gen_gaussian_spheres,
    import_nifti,
    load_volume,
    save_volume,
    scale_sphere_config,
)
from romt.grid import Grid, Volume
from romt.lagrangian import Pathline


def test_spheres_static_config_gives_identical_frames():
    cfg = SphereSynthConfig(dims=(12, 12, 12), n_frames=3,
                            center=(6, 6, 6), drift=(0, 0, 0),
                            std=1.5, growth=0.0)
    frames = gen_gaussian_spheres(cfg)
    for f in frames[1:]:
        assert np.allclose(f.data, frames[0].data, atol=1e-14)


def test_spheres_share_total_mass_and_track_drift():
    cfg = scale_sphere_config(SphereSynthConfig(), 0.5)  # 25^3 reduction
    frames = gen_gaussian_spheres(cfg)
    assert len(frames) == cfg.n_frames
    mass0 = frames[0].mass()
    for f in frames:
        assert abs(f.mass() - mass0) <= 1e-10 * mass0
    nx, ny, _ = cfg.dims
    for t, f in enumerate(frames):
        peak = np.argmax(f.data)
        pos = np.array([peak % nx, (peak // nx) % ny, peak // (nx * ny)])
        want = np.asarray(cfg.center) + t * np.asarray(cfg.drift)
        assert np.abs(pos - want).max() <= 0.5 + 1e-12


def test_spheres_boundary_warning():
    cfg = SphereSynthConfig(dims=(16, 16, 16), n_frames=2,
                            center=(2.0, 8.0, 8.0), drift=(0, 0, 0),
                            std=2.0, growth=0.0)
    with pytest.warns(UserWarning, match="boundary"):
        gen_gaussian_spheres(cfg)


def test_sphere_config_validation():
    with pytest.raises(ValueError):
        SphereSynthConfig(dims=(4, 16, 16))
    with pytest.raises(ValueError):
        SphereSynthConfig(n_frames=1)
    with pytest.raises(ValueError):
        SphereSynthConfig(std=0.0)
    with pytest.raises(ValueError):
        SphereSynthConfig(growth=-0.3)  # collapses by frame 5
    with pytest.raises(ValueError):
        scale_sphere_config(SphereSynthConfig(), 0.0)


def test_scale_sphere_config_rounds_half_up():
    base = SphereSynthConfig()
    assert scale_sphere_config(base, 0.5).dims == (25, 25, 25)
    assert scale_sphere_config(base, 0.75).dims == (38, 38, 38)
    assert scale_sphere_config(base, 1.25).dims == (63, 63, 63)
    assert scale_sphere_config(base, 1.75).dims == (88, 88, 88)


def test_save_load_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(43)
    grid = Grid((8, 8, 8), spacing=0.7)
    data = rng.random(grid.n, dtype=np.float32).astype(np.float64)
    vol = Volume(grid, data)
    save_volume(vol, tmp_path / "v.rvol")
    back = load_volume(tmp_path / "v.rvol")
    assert np.array_equal(back.data, data)
    assert back.grid.dims == grid.dims and back.grid.spacing == 0.7


def test_load_volume_errors(tmp_path):
    grid = Grid((2, 3, 4))
    vol = Volume(grid, np.arange(24, dtype=float))
    path = tmp_path / "v.rvol"
    save_volume(vol, path)
    assert np.array_equal(load_volume(path).data, np.arange(24.0))

    # truncated payload names expected vs actual byte counts
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(VolumeFormatError, match="96.*92"):
        load_volume(path)

    save_volume(vol, path)
    (tmp_path / "v.json").unlink()
    with pytest.raises(VolumeFormatError, match="sidecar"):
        load_volume(path)

    save_volume(vol, path)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(VolumeFormatError, match="checksum"):
        load_volume(path)

    (tmp_path / "w.rvol").write_bytes(b"\x00" * 96)
    (tmp_path / "w.json").write_text("{not json")
    with pytest.raises(VolumeFormatError, match="header"):
        load_volume(tmp_path / "w.rvol")


def test_import_nifti_float32(tmp_path):
    rng = np.random.default_rng(47)
    values = rng.random((3, 3, 3)).astype(np.float32)
    path = tmp_path / "fix.nii"
    path.write_bytes(build_nifti_bytes(values, datatype=16, pixdim1=2.0))
    vol = import_nifti(path)
    assert vol.grid.dims == (3, 3, 3)
    assert vol.grid.spacing == 2.0
    assert np.array_equal(vol.data, values.astype(np.float64).ravel(order="F"))


def test_import_nifti_int16_scaling(tmp_path):
    values = np.arange(27, dtype=np.int16).reshape(3, 3, 3)
    path = tmp_path / "fix.nii"
    path.write_bytes(build_nifti_bytes(values, datatype=4,
                                       scl_slope=2.0, scl_inter=1.0))
    vol = import_nifti(path)
    want = 2.0 * values.astype(np.float64).ravel(order="F") + 1.0
    assert np.array_equal(vol.data, want)
    # slope 0 means raw values
    path.write_bytes(build_nifti_bytes(values, datatype=4))
    assert np.array_equal(import_nifti(path).data,
                          values.astype(np.float64).ravel(order="F"))


def test_import_nifti_big_endian(tmp_path):
    values = np.linspace(0, 1, 27, dtype=np.float32).reshape(3, 3, 3)
    path = tmp_path / "be.nii"
    path.write_bytes(build_nifti_bytes(values, endian=">"))
    assert np.allclose(import_nifti(path).data,
                       values.astype(np.float64).ravel(order="F"))


def test_import_nifti_rejections(tmp_path):
    values = np.zeros((3, 3, 3), dtype=np.float32)
    bad_magic = tmp_path / "m.nii"
    bad_magic.write_bytes(build_nifti_bytes(values, magic=b"ni1\x00"))
    with pytest.raises(VolumeFormatError, match="magic"):
        import_nifti(bad_magic)

    f64 = tmp_path / "d.nii"
    f64.write_bytes(build_nifti_bytes(values.astype(np.float64), datatype=64))
    with pytest.raises(UnsupportedFormatError, match="datatype"):
        import_nifti(f64)

    gz = tmp_path / "z.nii"
    gz.write_bytes(b"\x1f\x8b" + b"\x00" * 400)
    with pytest.raises(UnsupportedFormatError, match="gzip"):
        import_nifti(gz)

    short = tmp_path / "s.nii"
    short.write_bytes(b"\x00" * 100)
    with pytest.raises(VolumeFormatError):
        import_nifti(short)

    trunc = tmp_path / "t.nii"
    blob = build_nifti_bytes(values)
    trunc.write_bytes(blob[:-8])
    with pytest.raises(VolumeFormatError, match="truncated"):
        import_nifti(trunc)


def _two_point_line():
    pts = np.array([[1.25, 2.5, 3.75], [1.75, 2.25, 3.5]])
    return Pathline(pts[0], pts, np.array([0.5, 0.25]), np.array([10.0, 20.0]))


def test_export_pathlines_csv_round_trip(tmp_path):
    rng = np.random.default_rng(53)
    pts = rng.uniform(0, 20, size=(5, 3))
    line = Pathline(pts[0], pts, rng.random(5), rng.random(5))
    path = tmp_path / "lines.csv"
    export_pathlines([line, _two_point_line()], path)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "line_id,point_idx,x,y,z,speed,peclet"
    assert len(rows) == 1 + 5 + 2
    parsed = np.array([[float(v) for v in r.split(",")[2:5]]
                       for r in rows[1:6]])
    assert np.allclose(parsed, pts, rtol=1e-8, atol=1e-12)


def test_export_pathlines_vtk_structure(tmp_path):
    path = tmp_path / "lines.vtk"
    export_pathlines([_two_point_line()], path, format="vtk_ascii")
    text = path.read_text().splitlines()
    assert text[3] == "DATASET POLYDATA"
    assert text[4] == "POINTS 2 float"
    assert "LINES 1 3" in text
    assert "SCALARS speed float 1" in text
    assert "SCALARS peclet float 1" in text
    assert text[text.index("LINES 1 3") + 1] == "2 0 1"


def test_export_pathlines_empty_and_bad_format(tmp_path):
    with pytest.raises(ValueError):
        export_pathlines([], tmp_path / "x.csv")
    assert not (tmp_path / "x.csv").exists()
    with pytest.raises(ValueError):
        export_pathlines([_two_point_line()], tmp_path / "x.bin",
                         format="binary")
