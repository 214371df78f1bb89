"""Cell-centered 3D grids, flat scalar/vector fields, and discrete operators.

Fields live at voxel centers of a uniform lattice. A scalar field is a flat
float64 vector of length n = nx*ny*nz in x-fastest order,

    index(i, j, k) = i + nx*j + nx*ny*k,

which is numpy's ``reshape(dims, order="F")``. A vector field stores its
three components as contiguous blocks ``[x | y | z]`` of total length 3n.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Grid",
    "Volume",
    "VectorField",
    "linear_index",
    "build_neg_laplacian",
    "gradient_field",
    "trilinear_sample",
]


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered lattice plus time-axis metadata.

    ``spacing`` is the isotropic voxel edge length h; ``voxel_volume`` is
    carried as metadata and is not folded into operators. ``n_intervals``
    and ``dt`` describe the time discretization a field series lives on.
    """

    dims: tuple[int, int, int]
    spacing: float = 1.0
    voxel_volume: float = 1.0
    n_intervals: int = 1
    dt: float = 1.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise ValueError(f"dims must be 3 integers >= 2, got {self.dims!r}")
        if not (self.spacing > 0) or not (self.voxel_volume > 0):
            raise ValueError("spacing and voxel_volume must be positive")
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be >= 1")
        if not (self.dt > 0):
            raise ValueError("dt must be positive")

    @property
    def n(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def with_time_axis(self, n_intervals: int, dt: float) -> "Grid":
        return dataclasses.replace(self, n_intervals=n_intervals, dt=dt)


def linear_index(i, j, k, grid: Grid):
    """Flat index of voxel (i, j, k); raises IndexError out of range."""
    nx, ny, nz = grid.dims
    i = np.asarray(i)
    j = np.asarray(j)
    k = np.asarray(k)
    if (
        np.any(i < 0) or np.any(i >= nx)
        or np.any(j < 0) or np.any(j >= ny)
        or np.any(k < 0) or np.any(k >= nz)
    ):
        raise IndexError(f"voxel index out of range for dims {grid.dims}")
    out = i + nx * j + (nx * ny) * k
    return int(out) if out.ndim == 0 else out


@dataclass
class Volume:
    """Flat scalar field on a grid (length grid.n, float64)."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 1 or data.size != self.grid.n:
            raise ValueError(
                f"volume data must be flat with length {self.grid.n}, "
                f"got shape {np.shape(self.data)}"
            )
        self.data = data

    @classmethod
    def from_3d(cls, grid: Grid, arr) -> "Volume":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != grid.dims:
            raise ValueError(f"expected shape {grid.dims}, got {arr.shape}")
        return cls(grid, arr.ravel(order="F"))

    def as_3d(self) -> np.ndarray:
        return self.data.reshape(self.grid.dims, order="F")

    def mass(self) -> float:
        return float(self.data.sum())


@dataclass
class VectorField:
    """Flat 3-component field, blocked [x | y | z] (length 3*grid.n)."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 1 or data.size != 3 * self.grid.n:
            raise ValueError(
                f"vector field data must be flat with length {3 * self.grid.n}, "
                f"got shape {np.shape(self.data)}"
            )
        self.data = data

    def component(self, axis: int) -> np.ndarray:
        n = self.grid.n
        return self.data[axis * n:(axis + 1) * n]

    def as_points(self) -> np.ndarray:
        """(n, 3) view-by-copy of the per-voxel vectors."""
        return self.data.reshape(3, self.grid.n).T

    def magnitude(self) -> np.ndarray:
        v = self.data.reshape(3, self.grid.n)
        return np.sqrt(np.einsum("ij,ij->j", v, v))


def build_neg_laplacian(grid: Grid, sigma: float) -> sp.csr_matrix:
    """Q = sigma * discrete Laplacian, 7-point stencil, Neumann boundary.

    Boundary rows drop the out-of-range neighbor and reduce the diagonal
    accordingly (mirrored ghost cell), so every row and column sums to
    zero exactly and Q is symmetric. sigma = 0 gives the zero matrix.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    nx, ny, nz = grid.dims
    n = grid.n
    w = sigma / grid.spacing**2

    idx = np.arange(n)
    coords = (idx % nx, (idx // nx) % ny, idx // (nx * ny))
    strides = (1, nx, nx * ny)

    rows = []
    cols = []
    diag = np.zeros(n)
    for axis in range(3):
        lo = idx[coords[axis] < grid.dims[axis] - 1]
        hi = lo + strides[axis]
        rows.append(lo)
        cols.append(hi)
        rows.append(hi)
        cols.append(lo)
        diag[lo] -= w
        diag[hi] -= w

    rows.append(idx)
    cols.append(idx)
    data = [np.full(r.size, w) for r in rows[:-1]] + [diag]
    q = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    q.eliminate_zeros()
    return q


def gradient_field(rho: Volume) -> VectorField:
    """Central-difference gradient, one-sided at the boundary faces."""
    f = rho.as_3d()
    gx, gy, gz = np.gradient(f, rho.grid.spacing, edge_order=1)
    data = np.concatenate(
        [gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")]
    )
    return VectorField(rho.grid, data)


def _clamped_base_frac(points: np.ndarray, dims) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis base voxel index and fractional offset, clamped to the hull
    of cell centers [0, dim-1]."""
    base = np.empty(points.shape, dtype=np.int64)
    frac = np.empty(points.shape)
    for ax in range(3):
        p = np.clip(points[:, ax], 0.0, dims[ax] - 1.0)
        b = np.minimum(np.floor(p).astype(np.int64), dims[ax] - 2)
        base[:, ax] = b
        frac[:, ax] = p - b
    return base, frac


_CORNERS = [(ox, oy, oz) for oz in (0, 1) for oy in (0, 1) for ox in (0, 1)]


def trilinear_sample(field, points):
    """Trilinear interpolation of a Volume or VectorField at point(s).

    Points are in voxel coordinates (cell centers at integers) and are
    clamped to the cell-center hull before interpolation. A single (3,)
    point returns a scalar / (3,) vector; an (N, 3) array returns (N,) /
    (N, 3). NaN coordinates are an argument error.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (3,) or (N, 3), got {np.shape(points)}")
    if np.isnan(pts).any():
        raise ValueError("NaN coordinates in sample points")

    grid = field.grid
    nx, ny, nz = grid.dims
    base, frac = _clamped_base_frac(pts, grid.dims)
    wax = [(1.0 - frac[:, ax], frac[:, ax]) for ax in range(3)]

    if isinstance(field, Volume):
        out = np.zeros(pts.shape[0])
        comps = (field.data,)
    else:
        out = np.zeros((pts.shape[0], 3))
        nvox = grid.n
        comps = tuple(field.data[a * nvox:(a + 1) * nvox] for a in range(3))

    for ox, oy, oz in _CORNERS:
        w = wax[0][ox] * wax[1][oy] * wax[2][oz]
        lin = (base[:, 0] + ox) + nx * (base[:, 1] + oy) + nx * ny * (base[:, 2] + oz)
        if isinstance(field, Volume):
            out += w * comps[0][lin]
        else:
            for a in range(3):
                out[:, a] += w * comps[a][lin]

    return out[0] if single else out
