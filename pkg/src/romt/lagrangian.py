"""Lagrangian post-processing: pathlines, speed / Peclet lines, flux vectors.

Particle trajectories follow the augmented velocity field

    v_aug = v - sigma * grad(log rho),

which adds the effective drift of the diffusion term, while the speed and
Peclet values attached to each trajectory point use the original v:

    s = ||v||_2,    Pe = ||v||_2 / (sigma * ||grad log max(rho, floor)||_2 + eps).

Velocity is piecewise constant in time (one field per transport interval)
and trilinearly interpolated in space; integration is explicit Euler with
n_sub substeps per interval, positions clamped to the cell-center hull.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .grid import Grid, Volume, VectorField, gradient_field, trilinear_sample

__all__ = [
    "PathlineConfig",
    "Pathline",
    "GlyphSet",
    "augmented_velocity",
    "seed_points",
    "trace_pathlines",
    "point_intervals",
    "attach_speed_peclet",
    "flux_vectors",
    "rasterize",
    "build_glyph_set",
    "pair_interval_fields",
    "series_interval_fields",
    "default_log_floor",
]


@dataclass(frozen=True)
class PathlineConfig:
    """n_sub Euler substeps per transport interval; flux vectors and
    displayed pathlines with total displacement < prune_threshold voxels
    are dropped."""

    n_sub: int = 1
    prune_threshold: float = 0.5

    def __post_init__(self):
        if self.n_sub < 1:
            raise ValueError("n_sub must be >= 1")
        if self.prune_threshold < 0:
            raise ValueError("prune_threshold must be >= 0")


@dataclass
class Pathline:
    """One trajectory: points[0] is the seed; speeds/peclets align with
    points (zeros until attach_speed_peclet fills them)."""

    seed: np.ndarray
    points: np.ndarray   # (T, 3)
    speeds: np.ndarray   # (T,)
    peclets: np.ndarray  # (T,)


@dataclass
class GlyphSet:
    """Rasterized speed/Peclet maps plus start->end flux vectors."""

    speed_map: Volume
    pe_map: Volume
    flux_vectors: list  # (start, end, length) per surviving pathline


def default_log_floor(volumes) -> float:
    """Density floor for log-gradients: 1e-8 of the series-wide maximum."""
    peak = max(float(vol.data.max()) for vol in volumes)
    if peak <= 0:
        return 1e-8
    return 1e-8 * peak


def augmented_velocity(v: VectorField, rho: Volume, sigma: float,
                       floor: float) -> VectorField:
    """v_aug = v - sigma * grad(log max(rho, floor))."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    if sigma == 0.0:
        return VectorField(v.grid, v.data.copy())
    log_rho = Volume(rho.grid, np.log(np.maximum(rho.data, floor)))
    grad = gradient_field(log_rho)
    return VectorField(v.grid, v.data - sigma * grad.data)


def seed_points(rho0: Volume, threshold_fraction: float, stride: int = 1,
                mask: Volume | None = None) -> np.ndarray:
    """Cell centers of voxels with rho0 >= threshold_fraction * max(rho0).

    Optional binary mask restricts the set; stride subsamples per axis.
    Returned as an (K, 3) float array in ascending linear-index order.
    """
    if not (0 <= threshold_fraction <= 1):
        raise ValueError("threshold_fraction must be in [0, 1]")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    nx, ny, _ = rho0.grid.dims
    sel = rho0.data >= threshold_fraction * rho0.data.max()
    if mask is not None:
        if mask.grid.dims != rho0.grid.dims:
            raise ValueError("mask grid does not match")
        sel &= mask.data > 0
    idx = np.nonzero(sel)[0]
    if stride > 1:
        i, j, k = idx % nx, (idx // nx) % ny, idx // (nx * ny)
        idx = idx[(i % stride == 0) & (j % stride == 0) & (k % stride == 0)]
    if idx.size == 0:
        warnings.warn("seed_points produced an empty seed set")
        return np.empty((0, 3))
    return np.stack([idx % nx, (idx // nx) % ny, idx // (nx * ny)], axis=1) \
        .astype(np.float64)


def trace_pathlines(seeds, aug_velocity_series, cfg: PathlineConfig) -> list:
    """Integrate seeds through the interval fields; one Pathline per seed.

    Each pathline records 1 + n_intervals*n_sub positions (fewer if the
    trace aborts on a NaN velocity sample, which is reported as a warning).
    """
    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.float64))
    if seeds.size == 0:
        return []
    if seeds.ndim != 2 or seeds.shape[1] != 3:
        raise ValueError("seeds must be an (K, 3) array")
    series = list(aug_velocity_series)
    if not series:
        raise ValueError("need at least one velocity field")
    grid = series[0].grid
    dims = np.asarray(grid.dims, dtype=np.float64)
    dt_sub = grid.dt / cfg.n_sub

    n_steps = len(series) * cfg.n_sub
    n_seeds = seeds.shape[0]
    pos = np.clip(seeds, 0.0, dims - 1.0)
    traj = np.zeros((n_steps + 1, n_seeds, 3))
    traj[0] = pos
    recorded = np.ones(n_seeds, dtype=np.int64)
    active = np.ones(n_seeds, dtype=bool)
    aborted = 0

    step = 0
    for fld in series:
        for _ in range(cfg.n_sub):
            step += 1
            if not active.any():
                break
            idx = np.nonzero(active)[0]
            vel = np.atleast_2d(trilinear_sample(fld, pos[idx]))
            bad = np.isnan(vel).any(axis=1)
            if bad.any():
                aborted += int(bad.sum())
                active[idx[bad]] = False
                idx = idx[~bad]
                vel = vel[~bad]
            pos[idx] = np.clip(pos[idx] + dt_sub * vel, 0.0, dims - 1.0)
            traj[step, idx] = pos[idx]
            recorded[idx] = step + 1

    if aborted:
        warnings.warn(f"{aborted} pathline(s) aborted on NaN velocity sample")
    return [
        Pathline(seed=seeds[k].copy(), points=traj[:recorded[k], k].copy(),
                 speeds=np.zeros(recorded[k]), peclets=np.zeros(recorded[k]))
        for k in range(n_seeds)
    ]


def point_intervals(n_points: int, n_sub: int, n_intervals: int) -> np.ndarray:
    """Transport interval owning each recorded point (boundary points
    belong to the interval they start)."""
    t = np.arange(n_points)
    return np.minimum(t // n_sub, n_intervals - 1)


def _infer_n_sub(pathlines, n_intervals: int) -> int:
    longest = max(len(pl.points) for pl in pathlines)
    n_sub, rem = divmod(longest - 1, n_intervals)
    if rem != 0 or n_sub < 1:
        raise ValueError(
            "cannot infer n_sub from aborted pathlines; pass n_sub explicitly")
    return n_sub


def attach_speed_peclet(pathlines, v_series, rho_series, sigma: float,
                        floor: float, eps: float = 1e-12,
                        n_sub: int | None = None) -> list:
    """Sample s = ||v|| and Pe at every recorded point of every pathline.

    v_series/rho_series are the per-interval original velocity fields and
    the densities at each interval's start, aligned with the trace. With
    sigma = 0 the Peclet ratio is undefined and reported as +inf.
    """
    if floor <= 0:
        raise ValueError("floor must be positive")
    pathlines = list(pathlines)
    if not pathlines:
        return []
    v_series = list(v_series)
    rho_series = list(rho_series)
    if len(v_series) != len(rho_series):
        raise ValueError("v_series and rho_series must have equal length")
    n_int = len(v_series)
    if n_sub is None:
        n_sub = _infer_n_sub(pathlines, n_int)

    counts = np.array([len(pl.points) for pl in pathlines])
    pts = np.concatenate([pl.points for pl in pathlines], axis=0)
    interval = np.concatenate(
        [point_intervals(c, n_sub, n_int) for c in counts])
    speeds = np.zeros(pts.shape[0])
    peclets = np.full(pts.shape[0], np.inf if sigma == 0.0 else 0.0)

    for i in np.unique(interval):
        sel = interval == i
        vel = np.atleast_2d(trilinear_sample(v_series[i], pts[sel]))
        s = np.linalg.norm(vel, axis=1)
        speeds[sel] = s
        if sigma == 0.0:
            continue
        rho = rho_series[i]
        log_rho = Volume(rho.grid, np.log(np.maximum(rho.data, floor)))
        grad = np.atleast_2d(trilinear_sample(gradient_field(log_rho), pts[sel]))
        denom = sigma * np.linalg.norm(grad, axis=1) + eps
        peclets[sel] = s / denom

    out = []
    start = 0
    for pl, c in zip(pathlines, counts):
        out.append(Pathline(pl.seed, pl.points,
                            speeds[start:start + c].copy(),
                            peclets[start:start + c].copy()))
        start += c
    return out


def flux_vectors(pathlines, prune_threshold: float = 0.5) -> list:
    """Start->end displacement of each pathline, pruning short ones."""
    pathlines = list(pathlines)
    if not pathlines:
        raise ValueError("pathlines must be non-empty")
    out = []
    for pl in pathlines:
        start = pl.points[0]
        end = pl.points[-1]
        length = float(np.linalg.norm(end - start))
        if length >= prune_threshold:
            out.append((start.copy(), end.copy(), length))
    return out


def rasterize(pathlines, kind: str, grid: Grid) -> Volume:
    """Mean of attached values bucketed into each point's nearest voxel.

    kind is "speed" or "pe"; voxels visited by no point are 0.
    """
    if kind not in ("speed", "pe"):
        raise ValueError('kind must be "speed" or "pe"')
    nx, ny, _ = grid.dims
    sums = np.zeros(grid.n)
    hits = np.zeros(grid.n)
    for pl in pathlines:
        if len(pl.points) == 0:
            continue
        vox = np.rint(pl.points).astype(np.int64)
        vox = np.clip(vox, 0, np.asarray(grid.dims) - 1)
        lin = vox[:, 0] + nx * vox[:, 1] + nx * ny * vox[:, 2]
        vals = pl.speeds if kind == "speed" else pl.peclets
        np.add.at(sums, lin, vals)
        np.add.at(hits, lin, 1.0)
    out = np.divide(sums, hits, out=np.zeros_like(sums), where=hits > 0)
    return Volume(grid, out)


def build_glyph_set(pathlines, grid: Grid,
                    prune_threshold: float = 0.5) -> GlyphSet:
    """Rasterized speed/Pe maps plus pruned flux vectors in one bundle."""
    return GlyphSet(
        speed_map=rasterize(pathlines, "speed", grid),
        pe_map=rasterize(pathlines, "pe", grid),
        flux_vectors=flux_vectors(pathlines, prune_threshold),
    )


def pair_interval_fields(rho_start: Volume, result):
    """Per-interval (velocity, start-density) lists for one solved pair."""
    grid = result.grid
    n = grid.n
    m = grid.n_intervals
    v_fields = [
        VectorField(grid, result.v_final[3 * n * j:3 * n * (j + 1)].copy())
        for j in range(m)
    ]
    rho_fields = [Volume(grid, rho_start.data)] + list(result.rho_interp[:-1])
    return v_fields, rho_fields


def series_interval_fields(volumes, results, chain_mode: str = "sequential"):
    """Concatenated per-interval fields across all pairs of a solved series.

    Pair r starts from the previous pair's final interpolated image in
    sequential mode, or from observed frame r in parallel mode. Returns
    (v_series, rho_series) aligned for trace/attach.
    """
    v_series = []
    rho_series = []
    current = volumes[0]
    for r, res in enumerate(results):
        start = current if chain_mode == "sequential" else volumes[r]
        v_f, rho_f = pair_interval_fields(start, res)
        v_series.extend(v_f)
        rho_series.extend(rho_f)
        current = res.rho_interp[-1]
    return v_series, rho_series
