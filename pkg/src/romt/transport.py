"""Particle-in-cell advection operators and the implicit diffusion solve.

One transport interval of length dt maps a density rho to

    rho' = L^{-1} S(v) rho,      L = I - dt * Q,

where S(v) is the particle-in-cell advection matrix (each voxel's mass is
carried dt*v along the local velocity and deposited trilinearly onto the
eight surrounding cell centers, displaced positions clamped to the
cell-center hull) and Q = sigma * Laplacian is the diffusion generator.
S is column-stochastic, so both stages conserve total mass; L is a
symmetric M-matrix, so the backward-Euler stage also preserves positivity.

B(rho, v) = d(S(v) rho)/dv is assembled analytically from the same deposit
geometry: the trilinear weights are piecewise linear in each displacement
component, and the right-limit derivative is taken at the (measure-zero)
integer breakpoints. Columns belonging to clamped axes are zero, matching
the clamp's flat dependence on v there, and every column of B sums to
zero exactly (mass is invariant under velocity perturbations).
"""

from __future__ import annotations

import functools
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Grid, Volume, VectorField, build_neg_laplacian

__all__ = [
    "AdvectionMatrix",
    "DepositDerivative",
    "DiffusionContext",
    "ConvergenceError",
    "DIRECT_SOLVE_MAX_VOXELS",
    "content_token",
    "build_S",
    "build_B",
    "make_diffusion_context",
    "diffuse_implicit",
    "advect_diffuse_step",
]

# direct sparse factorization of L up to this many voxels, iterative beyond
DIRECT_SOLVE_MAX_VOXELS = 32**3


class ConvergenceError(RuntimeError):
    """Iterative diffusion solve failed to reach tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


def content_token(arr: np.ndarray) -> int:
    """Cheap staleness token for an array's bytes (not cryptographic)."""
    return zlib.adler32(np.ascontiguousarray(arr).tobytes())


@dataclass
class AdvectionMatrix:
    """Sparse PIC advection matrix S(v) with the token of the velocity it
    was built from."""

    S: sp.csr_matrix
    velocity_token: int


@dataclass
class DepositDerivative:
    """Sparse B(rho, v) = d(S(v) rho)/dv, shape (n, 3n), with source tokens."""

    B: sp.csr_matrix
    density_token: int
    velocity_token: int


@functools.lru_cache(maxsize=8)
def _cell_centers(dims: tuple[int, int, int]) -> np.ndarray:
    nx, ny, nz = dims
    idx = np.arange(nx * ny * nz)
    return np.stack(
        [idx % nx, (idx // nx) % ny, idx // (nx * ny)]
    ).astype(np.float64)


def _deposit_geometry(v: VectorField, grid: Grid):
    """Displace each cell center by dt*v, clamp to the cell-center hull.

    Returns (base, frac, clamped): per-axis base index (3, n) int, fractional
    offset (3, n) in [0, 1], and a (3, n) bool mask of axes whose raw
    displaced coordinate left the hull.
    """
    if not np.isfinite(v.data).all():
        raise ValueError("velocity contains non-finite values")
    n = grid.n
    raw = _cell_centers(grid.dims) + grid.dt * v.data.reshape(3, n)
    base = np.empty((3, n), dtype=np.int64)
    frac = np.empty((3, n))
    clamped = np.empty((3, n), dtype=bool)
    for ax in range(3):
        top = grid.dims[ax] - 1.0
        clamped[ax] = (raw[ax] < 0.0) | (raw[ax] > top)
        p = np.clip(raw[ax], 0.0, top)
        b = np.minimum(np.floor(p).astype(np.int64), grid.dims[ax] - 2)
        base[ax] = b
        frac[ax] = p - b
    return base, frac, clamped


_CORNERS = [(ox, oy, oz) for oz in (0, 1) for oy in (0, 1) for ox in (0, 1)]


def _corner_rows(base: np.ndarray, dims, ox: int, oy: int, oz: int) -> np.ndarray:
    nx, ny, _ = dims
    return (base[0] + ox) + nx * (base[1] + oy) + nx * ny * (base[2] + oz)


def build_S(v: VectorField, grid: Grid) -> AdvectionMatrix:
    """Assemble the column-stochastic PIC advection matrix S(v).

    Column j holds the trilinear deposit weights of voxel j's displaced
    particle; S(0) is the identity exactly.
    """
    n = grid.n
    base, frac, _ = _deposit_geometry(v, grid)
    wax = [(1.0 - frac[ax], frac[ax]) for ax in range(3)]
    cols = np.arange(n)

    rows = np.empty((8, n), dtype=np.int64)
    vals = np.empty((8, n))
    for c, (ox, oy, oz) in enumerate(_CORNERS):
        rows[c] = _corner_rows(base, grid.dims, ox, oy, oz)
        vals[c] = wax[0][ox] * wax[1][oy] * wax[2][oz]

    S = sp.coo_matrix(
        (vals.ravel(), (rows.ravel(), np.tile(cols, 8))), shape=(n, n)
    ).tocsr()
    S.eliminate_zeros()
    return AdvectionMatrix(S, content_token(v.data))


def build_B(rho: Volume, v: VectorField, grid: Grid) -> DepositDerivative:
    """Assemble B(rho, v) = d(S(v) rho)/dv analytically, shape (n, 3n).

    Columns are blocked [x | y | z] like a flat VectorField. The derivative
    of a corner weight w.r.t. the displacement along one axis is +/- the
    product of the other two axes' weights (right limit at breakpoints),
    scaled by dt and the source mass rho_j; clamped axes contribute zero.
    """
    if rho.grid.dims != grid.dims:
        raise ValueError("density grid does not match")
    n = grid.n
    base, frac, clamped = _deposit_geometry(v, grid)
    wax = [(1.0 - frac[ax], frac[ax]) for ax in range(3)]
    cols0 = np.arange(n)

    rows = np.empty((3, 8, n), dtype=np.int64)
    cols = np.empty((3, 8, n), dtype=np.int64)
    vals = np.empty((3, 8, n))
    scale = grid.dt * rho.data
    for c, offs in enumerate(_CORNERS):
        rr = _corner_rows(base, grid.dims, *offs)
        for ax in range(3):
            o1, o2 = (a for a in range(3) if a != ax)
            dw = wax[o1][offs[o1]] * wax[o2][offs[o2]]
            entry = scale * (dw if offs[ax] == 1 else -dw)
            entry = np.where(clamped[ax], 0.0, entry)
            rows[ax, c] = rr
            cols[ax, c] = cols0 + ax * n
            vals[ax, c] = entry

    B = sp.coo_matrix(
        (vals.ravel(), (rows.ravel(), cols.ravel())), shape=(n, 3 * n)
    ).tocsr()
    B.eliminate_zeros()
    return DepositDerivative(B, content_token(rho.data), content_token(v.data))


@dataclass
class DiffusionContext:
    """Reusable solve context for L = I - dt * Q on one grid.

    ``solve`` maps b -> L^{-1} b. Direct sparse factorization when the grid
    has at most DIRECT_SOLVE_MAX_VOXELS voxels (exact mass conservation),
    Jacobi-preconditioned CG to ``tolerance`` beyond that, identity
    shortcut when sigma == 0.
    """

    grid: Grid
    sigma: float
    L: sp.csr_matrix
    tolerance: float
    method: str  # "identity" | "direct" | "cg"
    solve: Callable[[np.ndarray], np.ndarray]


def make_diffusion_context(
    grid: Grid,
    sigma: float,
    tolerance: float = 1e-10,
    direct_max_voxels: int = DIRECT_SOLVE_MAX_VOXELS,
) -> DiffusionContext:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    n = grid.n
    Q = build_neg_laplacian(grid, sigma)
    L = (sp.identity(n, format="csr") - grid.dt * Q).tocsr()

    if sigma == 0.0:
        return DiffusionContext(grid, sigma, L, tolerance, "identity",
                                lambda b: np.array(b, dtype=np.float64))

    if n <= direct_max_voxels:
        lu = spla.splu(L.tocsc())
        return DiffusionContext(grid, sigma, L, tolerance, "direct", lu.solve)

    precond = spla.LinearOperator(
        (n, n), matvec=functools.partial(np.multiply, 1.0 / L.diagonal())
    )

    def solve(b: np.ndarray) -> np.ndarray:
        x, info = spla.cg(L, b, rtol=tolerance, atol=0.0, M=precond,
                          maxiter=max(1000, 10 * grid.dims[0]))
        if info != 0:
            res = float(np.linalg.norm(L @ x - b) / max(np.linalg.norm(b), 1e-300))
            raise ConvergenceError("diffusion CG did not converge", res)
        return x

    return DiffusionContext(grid, sigma, L, tolerance, "cg", solve)


def diffuse_implicit(b: Volume, ctx: DiffusionContext) -> Volume:
    """One backward-Euler diffusion stage: solve L x = b."""
    if b.grid.dims != ctx.grid.dims:
        raise ValueError("volume grid does not match diffusion context")
    return Volume(b.grid, ctx.solve(b.data))


def advect_diffuse_step(rho: Volume, adv: AdvectionMatrix,
                        ctx: DiffusionContext) -> Volume:
    """One full transport interval: rho' = L^{-1} S(v) rho."""
    if rho.grid.dims != ctx.grid.dims:
        raise ValueError("volume grid does not match diffusion context")
    return Volume(rho.grid, ctx.solve(adv.S @ rho.data))
