"""Regularized optimal mass transport: solver, Lagrangian analysis, I/O."""

from .grid import (
    Grid,
    Volume,
    VectorField,
    build_neg_laplacian,
    gradient_field,
    linear_index,
    trilinear_sample,
)
from .transport import (
    AdvectionMatrix,
    ConvergenceError,
    DepositDerivative,
    DiffusionContext,
    advect_diffuse_step,
    build_B,
    build_S,
    diffuse_implicit,
    make_diffusion_context,
)
from .solver import (
    CacheStaleError,
    OperatorCache,
    PairResult,
    RomtConfig,
    SolverState,
    chain_cost,
    cost,
    forward_chain,
    gauss_newton,
    gradient,
    hessian_apply,
    jT_apply,
    jm_apply,
    jmT_apply,
    line_search,
    run_series,
    solve_gn_step,
)
from .lagrangian import (
    GlyphSet,
    Pathline,
    PathlineConfig,
    attach_speed_peclet,
    augmented_velocity,
    build_glyph_set,
    flux_vectors,
    rasterize,
    seed_points,
    trace_pathlines,
)
from .data_io import (
    SphereSynthConfig,
    UnsupportedFormatError,
    VolumeFormatError,
    export_pathlines,
    gen_gaussian_spheres,
    import_nifti,
    load_volume,
    save_volume,
)
from .bench import BenchReport, compare_modes, scaled_sphere_suite

__version__ = "0.1.0"
