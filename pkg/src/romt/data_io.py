"""Volume serialization, NIfTI-1 ingestion, synthetic data, exports.

The canonical on-disk volume format is a raw little-endian float32 payload
in x-fastest order plus a JSON sidecar (same basename, .json suffix) with
dims, spacing, and a CRC32 checksum. NIfTI-1 is import-only and parsed by
hand from the public fixed 348-byte header layout.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Grid, Volume

__all__ = [
    "VolumeFormatError",
    "UnsupportedFormatError",
    "SphereSynthConfig",
    "scale_sphere_config",
    "gen_gaussian_spheres",
    "save_volume",
    "load_volume",
    "import_nifti",
    "export_pathlines",
]


class VolumeFormatError(Exception):
    """Malformed or inconsistent volume file."""


class UnsupportedFormatError(VolumeFormatError):
    """Recognized file, but a feature outside the supported subset."""


@dataclass(frozen=True)
class SphereSynthConfig:
    """Drifting, spreading Gaussian sphere sequence.

    Frame t is A*exp(-||x - c_t||^2 / (2 s_t^2)) with c_t = center + t*drift
    and s_t = std*(1 + t*growth); frames are rescaled to share frame 0's
    total mass.
    """

    dims: tuple[int, int, int] = (50, 50, 50)
    n_frames: int = 5
    center: tuple[float, float, float] = (18.0, 25.0, 25.0)
    drift: tuple[float, float, float] = (4.5, 0.0, 0.0)
    std: float = 5.0
    growth: float = -0.12
    amplitude: float = 1.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "drift", tuple(float(d) for d in self.drift))
        if len(dims) != 3 or any(d < 8 for d in dims):
            raise ValueError("dims must be >= 8 per axis")
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        if not (self.std > 0):
            raise ValueError("std must be positive")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if self.std * (1 + (self.n_frames - 1) * self.growth) <= 0:
            raise ValueError("growth collapses the sphere before the last frame")


def scale_sphere_config(cfg: SphereSynthConfig, factor: float) -> SphereSynthConfig:
    """Geometric rescale: dims round half-up, lengths scale linearly."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    return dataclasses.replace(
        cfg,
        dims=tuple(int(d * factor + 0.5) for d in cfg.dims),
        center=tuple(c * factor for c in cfg.center),
        drift=tuple(d * factor for d in cfg.drift),
        std=cfg.std * factor,
    )


def gen_gaussian_spheres(cfg: SphereSynthConfig) -> list:
    """Synthesize the frame sequence; warns when a sphere's 3-sigma ball
    touches the domain boundary."""
    grid = Grid(cfg.dims)
    nx, ny, nz = cfg.dims
    idx = np.arange(grid.n)
    coords = np.stack([idx % nx, (idx // nx) % ny, idx // (nx * ny)])

    frames = []
    mass0 = None
    for t in range(cfg.n_frames):
        c = np.asarray(cfg.center) + t * np.asarray(cfg.drift)
        s = cfg.std * (1 + t * cfg.growth)
        for ax in range(3):
            if c[ax] - 3 * s < 0 or c[ax] + 3 * s > cfg.dims[ax] - 1:
                warnings.warn(
                    f"frame {t}: sphere within 3 sigma of the boundary "
                    f"(center {tuple(c)}, sigma {s:.3g})")
                break
        d2 = ((coords - c[:, None]) ** 2).sum(axis=0)
        vals = cfg.amplitude * np.exp(-d2 / (2 * s * s))
        if mass0 is None:
            mass0 = vals.sum()
        else:
            vals *= mass0 / vals.sum()
        frames.append(Volume(grid, vals))
    return frames


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_volume(vol: Volume, path) -> None:
    """Raw <f4 payload + JSON sidecar; round-trips bit-exactly."""
    path = Path(path)
    payload = vol.data.astype("<f4").tobytes()
    header = {
        "dims": list(vol.grid.dims),
        "spacing": vol.grid.spacing,
        "dtype": "float32-le",
        "order": "x-fastest",
        "checksum_crc32": f"{zlib.crc32(payload):08x}",
    }
    path.write_bytes(payload)
    _sidecar_path(path).write_text(json.dumps(header, indent=2, sort_keys=True))


def load_volume(path) -> Volume:
    """Inverse of save_volume; malformed files raise VolumeFormatError."""
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise VolumeFormatError(f"missing sidecar header {sidecar}")
    try:
        header = json.loads(sidecar.read_text())
        dims = tuple(int(d) for d in header["dims"])
        spacing = float(header.get("spacing", 1.0))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"bad sidecar header {sidecar}: {exc}") from exc
    if len(dims) != 3:
        raise VolumeFormatError(f"sidecar dims must have 3 entries, got {dims}")

    payload = path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: expected {expected} payload bytes for dims {dims}, "
            f"got {len(payload)}")
    stored = header.get("checksum_crc32")
    if stored is not None and f"{zlib.crc32(payload):08x}" != stored:
        raise VolumeFormatError(f"{path}: checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return Volume(Grid(dims, spacing=spacing), data)


# NIfTI-1 header fields used here (offsets per the public fixed layout):
# sizeof_hdr i32 @0, dim i16[8] @40, datatype i16 @70, bitpix i16 @72,
# pixdim f32[8] @76, vox_offset f32 @108, scl_slope f32 @112,
# scl_inter f32 @116, magic char[4] @344.
_NIFTI_DTYPES = {16: np.dtype(np.float32), 4: np.dtype(np.int16)}


def import_nifti(path) -> Volume:
    """Read an uncompressed single-file NIfTI-1 volume (float32 or int16).

    int16 data with scl_slope != 0 is rescaled to slope*v + inter. Voxel
    spacing is taken from pixdim[1] when positive. gzip payloads and other
    datatypes raise UnsupportedFormatError naming the offending field.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise UnsupportedFormatError(
            f"{path}: gzip-compressed; decompress to plain .nii first")
    if len(raw) < 348:
        raise VolumeFormatError(f"{path}: shorter than a NIfTI-1 header")

    end = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise VolumeFormatError(f"{path}: sizeof_hdr is not 348")
        end = ">"

    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise VolumeFormatError(f"{path}: magic {magic!r} is not 'n+1\\0'")

    dim = struct.unpack_from(end + "8h", raw, 40)
    if dim[0] < 3 or any(d != 1 for d in dim[4:4 + max(0, dim[0] - 3)]):
        raise VolumeFormatError(f"{path}: dim field {dim} is not a 3D volume")
    dims = (int(dim[1]), int(dim[2]), int(dim[3]))

    (datatype,) = struct.unpack_from(end + "h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedFormatError(
            f"{path}: datatype {datatype} unsupported (float32=16, int16=4)")
    pixdim = struct.unpack_from(end + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(end + "f", raw, 108)
    slope, inter = struct.unpack_from(end + "2f", raw, 112)

    offset = int(vox_offset)
    dt = _NIFTI_DTYPES[datatype].newbyteorder(end)
    count = dims[0] * dims[1] * dims[2]
    if len(raw) < offset + count * dt.itemsize:
        raise VolumeFormatError(
            f"{path}: payload truncated "
            f"(need {count * dt.itemsize} bytes at offset {offset})")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=offset) \
        .astype(np.float64)
    if datatype == 4 and slope != 0.0:
        data = slope * data + inter

    spacing = float(pixdim[1]) if np.isfinite(pixdim[1]) and pixdim[1] > 0 else 1.0
    return Volume(Grid(dims, spacing=spacing), data)


def export_pathlines(pathlines, path, format: str = "csv") -> None:
    """Write pathlines as CSV rows or VTK legacy ASCII polydata.

    CSV columns: line_id, point_idx, x, y, z, speed, peclet (9 significant
    digits). VTK carries POINTS, LINES, and "speed"/"peclet" point scalars.
    """
    pathlines = list(pathlines)
    if not pathlines:
        raise ValueError("no pathlines to export")
    if format not in ("csv", "vtk_ascii"):
        raise ValueError(f"unknown format {format!r}")
    path = Path(path)

    if format == "csv":
        lines = ["line_id,point_idx,x,y,z,speed,peclet"]
        for li, pl in enumerate(pathlines):
            for pi, (p, s, pe) in enumerate(zip(pl.points, pl.speeds, pl.peclets)):
                lines.append(
                    f"{li},{pi},{p[0]:.9g},{p[1]:.9g},{p[2]:.9g},{s:.9g},{pe:.9g}")
        path.write_text("\n".join(lines) + "\n")
        return

    n_points = sum(len(pl.points) for pl in pathlines)
    out = [
        "# vtk DataFile Version 3.0",
        "pathlines",
        "ASCII",
        "DATASET POLYDATA",
        f"POINTS {n_points} float",
    ]
    for pl in pathlines:
        out.extend(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in pl.points)
    size = sum(1 + len(pl.points) for pl in pathlines)
    out.append(f"LINES {len(pathlines)} {size}")
    start = 0
    for pl in pathlines:
        k = len(pl.points)
        out.append(" ".join(str(i) for i in [k, *range(start, start + k)]))
        start += k
    out.append(f"POINT_DATA {n_points}")
    for name, attr in (("speed", "speeds"), ("peclet", "peclets")):
        out.append(f"SCALARS {name} float 1")
        out.append("LOOKUP_TABLE default")
        for pl in pathlines:
            out.extend(f"{val:.9g}" for val in getattr(pl, attr))
    path.write_text("\n".join(out) + "\n")
