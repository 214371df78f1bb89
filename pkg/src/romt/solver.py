"""Gauss-Newton solver for kinetic-energy-minimal transport between images.

Given a nonnegative source image rho0 and observed target rho1_obs, find the
per-interval velocity stack v = [v_0; ...; v_{m-1}] (each block a flat
[x|y|z] field, total length 3*m*n) minimizing

    F(v) = k_s*k_t * sum_j rho_{j+1} . |v_j|^2  +  beta * ||rho_m - rho1_obs||^2

subject to the discrete transport chain rho_{j+1} = L^{-1} S(v_j) rho_j.
The gradient and Gauss-Newton Hessian applications need products with the
chain Jacobian J (and its final-state row block J_m); these are evaluated
matrix-free by forward/backward sweeps over per-interval sparse operators:

    (J_m x)         : a <- L^{-1}(S_j a + B_j x_j),          j = 0..m-1
    (J_m^T y)_j     : t <- L^{-1} y once, then out_j = B_j^T t,
                      t <- L^{-1}(S_j^T t) stepping j = m-1..0
    (J^T w)_j       : a <- L^{-1}(w_j + S_{j+1}^T a),  out_j = B_j^T a

All S(v_j) and B(rho_j) for the current iterate are assembled once per
outer iteration and reused across every PCG application (the operator
cache); the naive mode reassembles them inside every product, for the
cost comparison. A velocity token guards against using a stale cache.
"""

from __future__ import annotations

import concurrent.futures
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid, Volume, VectorField
from .transport import (
    DiffusionContext,
    build_B,
    build_S,
    content_token,
    make_diffusion_context,
)

__all__ = [
    "RomtConfig",
    "OperatorCache",
    "SolverState",
    "PcgInfo",
    "PairResult",
    "CacheStaleError",
    "forward_chain",
    "chain_cost",
    "cost",
    "jm_apply",
    "jmT_apply",
    "jT_apply",
    "gradient",
    "hessian_apply",
    "solve_gn_step",
    "line_search",
    "gauss_newton",
    "run_series",
    "resolve_workers",
]

CHAIN_MODES = ("sequential", "parallel")


class CacheStaleError(RuntimeError):
    """Operator cache does not match the state's current velocity."""


@dataclass(frozen=True)
class RomtConfig:
    """Solver parameters. Defaults reproduce the reference 50-cube setup."""

    sigma: float = 0.002
    beta: float = 5000.0
    m: int = 10
    k_t: float = 0.4
    k_s: float = 1.0
    max_gn_iters: int = 20
    pcg_rel_tol: float = 1e-2
    pcg_max_iters: int = 50
    ls_max_halvings: int = 10
    ls_sufficient_decrease: float = 1e-4
    chain_mode: str = "sequential"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not (self.k_t > 0) or not (self.k_s > 0):
            raise ValueError("k_t and k_s must be positive")
        if self.max_gn_iters < 0 or self.pcg_max_iters < 1:
            raise ValueError("iteration limits out of range")
        if self.ls_max_halvings < 0 or not (0 < self.ls_sufficient_decrease < 1):
            raise ValueError("line-search parameters out of range")
        if self.chain_mode not in CHAIN_MODES:
            raise ValueError(f"chain_mode must be one of {CHAIN_MODES}")


@dataclass
class OperatorCache:
    """Per-interval sparse operators for one velocity iterate.

    S[j], B[j] are the advection matrix and deposit derivative of interval
    j; ST[j], BT[j] are their CSR transposes (built once, reused in the
    backward sweeps). Tokens identify the velocity/density they came from.
    """

    S: list
    ST: list
    B: list
    BT: list
    velocity_token: int
    density_token: int


def _solver_grid(grid: Grid, cfg: RomtConfig) -> Grid:
    """The config owns the time axis: m intervals of length k_t."""
    return grid.with_time_axis(cfg.m, cfg.k_t)


def _interval(v: np.ndarray, j: int, n: int) -> np.ndarray:
    return v[3 * n * j:3 * n * (j + 1)]


def forward_chain(rho0, v, cfg, diffusion=None, build_cache=True):
    """Run the transport chain from rho0 under velocity stack v.

    Returns (rhos, cache): the m interpolated densities rho_1..rho_m and,
    when build_cache, the OperatorCache of every S(v_j), B(rho_j) and
    their transposes (None otherwise). Total mass is conserved at every
    step up to the diffusion solve tolerance.
    """
    grid = _solver_grid(rho0.grid, cfg)
    v = np.asarray(v, dtype=np.float64)
    n = grid.n
    if v.shape != (3 * cfg.m * n,):
        raise ValueError(f"velocity stack must have shape ({3 * cfg.m * n},)")
    if diffusion is None:
        diffusion = make_diffusion_context(grid, cfg.sigma)

    rho = Volume(grid, rho0.data)
    rhos = []
    S_list, ST_list, B_list, BT_list = [], [], [], []
    for j in range(cfg.m):
        vj = VectorField(grid, _interval(v, j, n))
        adv = build_S(vj, grid)
        if build_cache:
            dep = build_B(rho, vj, grid)
            S_list.append(adv.S)
            ST_list.append(adv.S.T.tocsr())
            B_list.append(dep.B)
            BT_list.append(dep.B.T.tocsr())
        rho = Volume(grid, diffusion.solve(adv.S @ rho.data))
        rhos.append(rho)

    cache = None
    if build_cache:
        cache = OperatorCache(S_list, ST_list, B_list, BT_list,
                              content_token(v), content_token(rho0.data))
    return rhos, cache


class SolverState:
    """One velocity iterate plus everything derived from it.

    Holds the chain densities rho_1..rho_m and (unless cache_ops=False)
    the operator cache. Reassigning ``state.v`` without rebuilding makes
    the derived data stale; the apply routines then raise CacheStaleError.
    """

    def __init__(self, rho0, rho1_obs, v, cfg, diffusion=None, cache_ops=True):
        grid = _solver_grid(rho0.grid, cfg)
        if rho1_obs.grid.dims != grid.dims:
            raise ValueError("rho0 and rho1_obs must share a grid")
        self.grid = grid
        self.cfg = cfg
        self.rho0 = Volume(grid, rho0.data)
        self.rho1_obs = Volume(grid, rho1_obs.data)
        self.diffusion = diffusion if diffusion is not None else \
            make_diffusion_context(grid, cfg.sigma)
        self.cache_ops = cache_ops
        self.v = v
        self.rho, self.cache = forward_chain(
            self.rho0, self._v, cfg, self.diffusion, build_cache=cache_ops)
        self._chain_token = self._v_token

    @property
    def v(self) -> np.ndarray:
        return self._v

    @v.setter
    def v(self, value):
        value = np.array(value, dtype=np.float64)
        if value.shape != (3 * self.cfg.m * self.grid.n,):
            raise ValueError("velocity stack has wrong length")
        value.setflags(write=False)
        self._v = value
        self._v_token = content_token(value)

    def _check_fresh(self):
        if self._v_token != self._chain_token:
            raise CacheStaleError(
                "state.v was reassigned after the chain/cache was built")
        if self.cache_ops and self.cache.velocity_token != self._v_token:
            raise CacheStaleError("operator cache velocity token mismatch")

    def _ops(self, j: int):
        """(S, S^T, B, B^T) for interval j - cached, or rebuilt on the fly."""
        if self.cache_ops:
            c = self.cache
            return c.S[j], c.ST[j], c.B[j], c.BT[j]
        n = self.grid.n
        vj = VectorField(self.grid, _interval(self._v, j, n))
        rho_j = self.rho0 if j == 0 else self.rho[j - 1]
        adv = build_S(vj, self.grid)
        dep = build_B(rho_j, vj, self.grid)
        return adv.S, adv.S.T.tocsr(), dep.B, dep.B.T.tocsr()


def _cost_terms(rhos, v, rho1_obs_data, cfg):
    n = rhos[0].grid.n
    energy = 0.0
    for j in range(cfg.m):
        vj = _interval(v, j, n).reshape(3, n)
        energy += float(rhos[j].data @ np.einsum("ij,ij->j", vj, vj))
    energy *= cfg.k_s * cfg.k_t
    diff = rhos[-1].data - rho1_obs_data
    fit = cfg.beta * float(diff @ diff)
    return energy + fit, energy, fit


def chain_cost(rho0, rho1_obs, v, cfg, diffusion=None):
    """(total, energy, fit) of a trial velocity, without caching operators."""
    rhos, _ = forward_chain(rho0, v, cfg, diffusion, build_cache=False)
    return _cost_terms(rhos, np.asarray(v, dtype=np.float64),
                       rho1_obs.data, cfg)


def cost(state: SolverState, cfg: RomtConfig):
    """(total, energy, fit) at the state's current iterate."""
    state._check_fresh()
    return _cost_terms(state.rho, state.v, state.rho1_obs.data, cfg)


def jm_apply(x, state: SolverState) -> np.ndarray:
    """Final-state Jacobian product J_m x (forward sweep), shape (n,)."""
    state._check_fresh()
    n, m = state.grid.n, state.cfg.m
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3 * m * n,):
        raise ValueError("x must be a flat velocity stack")
    a = None
    for j in range(m):
        S, _, B, _ = state._ops(j)
        t = B @ _interval(x, j, n)
        if a is not None:
            t += S @ a
        a = state.diffusion.solve(t)
    return a


def jmT_apply(y, state: SolverState) -> np.ndarray:
    """Adjoint product J_m^T y (backward sweep), shape (3*m*n,)."""
    state._check_fresh()
    n, m = state.grid.n, state.cfg.m
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n,):
        raise ValueError("y must be a flat volume")
    out = np.empty(3 * m * n)
    t = state.diffusion.solve(y)
    for j in range(m - 1, -1, -1):
        _, ST, _, BT = state._ops(j)
        out[3 * n * j:3 * n * (j + 1)] = BT @ t
        if j > 0:
            t = state.diffusion.solve(ST @ t)
    return out


def jT_apply(w, state: SolverState) -> np.ndarray:
    """Full-chain adjoint J^T w for stacked per-step weights w (m blocks).

    w[k-1] weights rho_k; the backward recursion injects each block as it
    passes that chain depth: a <- L^{-1}(w_j + S_{j+1}^T a), out_j = B_j^T a.
    """
    state._check_fresh()
    n, m = state.grid.n, state.cfg.m
    w = np.asarray(w, dtype=np.float64).reshape(m, n)
    out = np.empty(3 * m * n)
    a = None
    for j in range(m - 1, -1, -1):
        if a is None:
            rhs = w[j]
        else:
            _, ST_next, _, _ = state._ops(j + 1)
            rhs = w[j] + ST_next @ a
        a = state.diffusion.solve(rhs)
        _, _, _, BT = state._ops(j)
        out[3 * n * j:3 * n * (j + 1)] = BT @ a
    return out


def _mt_rho(state: SolverState) -> np.ndarray:
    """M^T rho: each interval block is rho_{j+1} repeated over x, y, z."""
    n, m = state.grid.n, state.cfg.m
    out = np.empty(3 * m * n)
    for j in range(m):
        out[3 * n * j:3 * n * (j + 1)] = np.tile(state.rho[j].data, 3)
    return out


def _speeds_sq(state: SolverState) -> np.ndarray:
    """M(v .* v): per-step |v_j|^2 fields, shape (m, n)."""
    n, m = state.grid.n, state.cfg.m
    w = np.empty((m, n))
    for j in range(m):
        vj = _interval(state.v, j, n).reshape(3, n)
        w[j] = np.einsum("ij,ij->j", vj, vj)
    return w


def gradient(state: SolverState, cfg: RomtConfig) -> np.ndarray:
    """dF/dv at the current iterate, shape (3*m*n,)."""
    state._check_fresh()
    g = cfg.k_s * cfg.k_t * (
        2.0 * state.v * _mt_rho(state) + jT_apply(_speeds_sq(state), state)
    )
    resid = state.rho[-1].data - state.rho1_obs.data
    g += 2.0 * cfg.beta * jmT_apply(resid, state)
    return g


def hessian_apply(x, state: SolverState, cfg: RomtConfig) -> np.ndarray:
    """Gauss-Newton Hessian product H x (PSD approximation).

    H x = 2 k_s k_t diag(M^T rho) x + 2 beta J_m^T (J_m x); the two chain
    sweeps run back to back against the same cache.
    """
    state._check_fresh()
    x = np.asarray(x, dtype=np.float64)
    return (2.0 * cfg.k_s * cfg.k_t) * _mt_rho(state) * x \
        + (2.0 * cfg.beta) * jmT_apply(jm_apply(x, state), state)


@dataclass
class PcgInfo:
    iterations: int
    relative_residual: float
    converged: bool
    breakdown: bool = False


def solve_gn_step(state: SolverState, cfg: RomtConfig, g=None):
    """Preconditioned CG on H step = -g. Returns (step, PcgInfo).

    Jacobi preconditioner from the kinetic diagonal 2 k_s k_t M^T rho,
    floored at 1e-8 of its max (identity if the density is all zero).
    A non-positive curvature p^T H p ends the solve with the best iterate
    so far and the breakdown flag set.
    """
    if g is None:
        g = gradient(state, cfg)
    b = -np.asarray(g, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), PcgInfo(0, 0.0, True)

    diag = 2.0 * cfg.k_s * cfg.k_t * _mt_rho(state)
    dmax = float(diag.max())
    minv = 1.0 / np.maximum(diag, 1e-8 * dmax) if dmax > 0 else np.ones_like(diag)

    x = np.zeros_like(b)
    r = b.copy()
    z = minv * r
    p = z.copy()
    rz = float(r @ z)
    relres = 1.0
    iters = 0
    for iters in range(1, cfg.pcg_max_iters + 1):
        hp = hessian_apply(p, state, cfg)
        php = float(p @ hp)
        if php <= 0.0:
            warnings.warn("PCG curvature breakdown; returning best iterate",
                          RuntimeWarning)
            return x, PcgInfo(iters, relres, False, breakdown=True)
        alpha = rz / php
        x += alpha * p
        r -= alpha * hp
        relres = float(np.linalg.norm(r)) / bnorm
        if relres <= cfg.pcg_rel_tol:
            return x, PcgInfo(iters, relres, True)
        z = minv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, PcgInfo(iters, relres, False)


def line_search(state: SolverState, step, cfg: RomtConfig, g=None):
    """Armijo backtracking from l = 1, halving. Returns l or None.

    Accepts l when F(v + l*step) <= F(v) - c*l*|<g, step>|. A zero step or
    exhausting ls_max_halvings halvings is failure. Trial costs rerun the
    chain without building operator caches.
    """
    if g is None:
        g = gradient(state, cfg)
    step = np.asarray(step, dtype=np.float64)
    descent = abs(float(g @ step))
    if descent == 0.0 or not np.isfinite(descent) or not np.any(step):
        return None
    f0 = cost(state, cfg)[0]
    length = 1.0
    for _ in range(cfg.ls_max_halvings + 1):
        f_trial = chain_cost(state.rho0, state.rho1_obs, state.v + length * step,
                             cfg, state.diffusion)[0]
        if np.isfinite(f_trial) and \
                f_trial <= f0 - cfg.ls_sufficient_decrease * length * descent:
            return length
        length *= 0.5
    return None


@dataclass
class PairResult:
    """Outcome of one source->target solve."""

    grid: Grid
    v_final: np.ndarray
    rho_interp: list          # Volume rho_1..rho_m at the final iterate
    cost_history: list        # (energy, fit) per accepted iterate, v=0 first
    stop_reason: str          # "max-iters" | "line-search-failure"
    gn_iters: int
    pcg_iters_total: int

    @property
    def final_cost(self) -> float:
        e, f = self.cost_history[-1]
        return e + f


def _validate_pair(rho0: Volume, rho1_obs: Volume):
    if rho0.grid.dims != rho1_obs.grid.dims or \
            rho0.grid.spacing != rho1_obs.grid.spacing:
        raise ValueError("rho0 and rho1_obs must live on the same grid")
    for name, vol in (("rho0", rho0), ("rho1_obs", rho1_obs)):
        if not np.isfinite(vol.data).all():
            raise ValueError(f"{name} contains non-finite values")
        if (vol.data < 0).any():
            raise ValueError(f"{name} must be nonnegative")


def gauss_newton(rho0: Volume, rho1_obs: Volume, cfg: RomtConfig,
                 cache_ops: bool = True, diffusion=None) -> PairResult:
    """Solve one image pair from v = 0. Accepted iterates only, so the
    total cost in cost_history is non-increasing."""
    _validate_pair(rho0, rho1_obs)
    grid = _solver_grid(rho0.grid, cfg)
    if diffusion is None:
        diffusion = make_diffusion_context(grid, cfg.sigma)

    v = np.zeros(3 * cfg.m * grid.n)
    state = SolverState(rho0, rho1_obs, v, cfg, diffusion, cache_ops)
    _, e, f = cost(state, cfg)
    history = [(e, f)]
    stop_reason = "max-iters"
    gn_iters = 0
    pcg_total = 0
    for _ in range(cfg.max_gn_iters):
        g = gradient(state, cfg)
        step, info = solve_gn_step(state, cfg, g)
        pcg_total += info.iterations
        length = line_search(state, step, cfg, g)
        if length is None:
            stop_reason = "line-search-failure"
            break
        state = SolverState(rho0, rho1_obs, state.v + length * step, cfg,
                            diffusion, cache_ops)
        _, e, f = cost(state, cfg)
        history.append((e, f))
        gn_iters += 1
    return PairResult(grid, state.v, state.rho, history, stop_reason,
                      gn_iters, pcg_total)


def resolve_workers(requested, n_tasks: int) -> int:
    """Worker count for parallel pair solves; ROMT_THREADS caps it."""
    if requested is None:
        requested = os.cpu_count() or 1
    if requested < 1:
        raise ValueError("workers must be >= 1")
    cap = os.environ.get("ROMT_THREADS")
    if cap is not None:
        try:
            cap = int(cap)
        except ValueError as exc:
            raise ValueError(f"ROMT_THREADS must be an integer, got {cap!r}") from exc
        if cap >= 1:
            requested = min(requested, cap)
    return max(1, min(requested, n_tasks))


def _pair_task(args):
    i, rho0, rho1, cfg, cache_ops = args
    return i, gauss_newton(rho0, rho1, cfg, cache_ops=cache_ops)


def run_series(volumes, cfg: RomtConfig, workers=None,
               cache_ops: bool = True) -> list:
    """Solve a series of p >= 2 frames into p-1 PairResults.

    chain_mode "sequential": pair r starts from pair r-1's final
    interpolated image, so interval fields concatenate smoothly. chain_mode
    "parallel": pairs are independent (observed frame r -> frame r+1) and
    run across worker processes; results are identical to isolated solves
    and ordered by pair index.
    """
    volumes = list(volumes)
    if len(volumes) < 2:
        raise ValueError("need at least two frames")
    dims = volumes[0].grid.dims
    for vol in volumes[1:]:
        if vol.grid.dims != dims:
            raise ValueError("all frames must share a grid")

    if cfg.chain_mode == "sequential":
        diffusion = make_diffusion_context(
            _solver_grid(volumes[0].grid, cfg), cfg.sigma)
        results = []
        current = volumes[0]
        for nxt in volumes[1:]:
            res = gauss_newton(current, nxt, cfg, cache_ops, diffusion)
            results.append(res)
            current = res.rho_interp[-1]
        return results

    tasks = [(i, volumes[i], volumes[i + 1], cfg, cache_ops)
             for i in range(len(volumes) - 1)]
    n_workers = resolve_workers(workers, len(tasks))
    if n_workers == 1:
        return [_pair_task(t)[1] for t in tasks]
    results = [None] * len(tasks)
    with concurrent.futures.ProcessPoolExecutor(max_workers=n_workers) as pool:
        for i, res in pool.map(_pair_task, tasks):
            results[i] = res
    return results
