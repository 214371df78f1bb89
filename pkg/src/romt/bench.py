"""Runtime scaling study: naive recompute vs cached operators vs parallel.

All modes solve the same independent image pairs with the same RomtConfig;
they differ only in when the per-interval sparse operators are assembled
(naive: inside every Jacobian/Hessian application, emulating the previous
algorithm's structure; cached: once per outer iteration) and in whether
pairs run across worker processes. Wall clock covers the solves only.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

from .data_io import SphereSynthConfig, gen_gaussian_spheres, scale_sphere_config
from .solver import RomtConfig, resolve_workers, run_series

__all__ = ["BenchRow", "BenchReport", "scaled_sphere_suite", "compare_modes"]

MODES = ("naive", "cached", "cached_parallel")


@dataclass
class BenchRow:
    scale_factor: float
    dims: tuple[int, int, int]
    mode: str
    wall_seconds: float
    gn_iters: int
    pcg_iters_total: int
    workers: int
    error: str | None = None


@dataclass
class BenchReport:
    rows: list

    CSV_HEADER = ("scale_factor,dims,mode,wall_seconds,gn_iters,"
                  "pcg_iters_total,workers,error")

    def write_csv(self, path) -> None:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            dims = "x".join(str(d) for d in r.dims)
            lines.append(
                f"{r.scale_factor:g},{dims},{r.mode},{r.wall_seconds:.6f},"
                f"{r.gn_iters},{r.pcg_iters_total},{r.workers},"
                f"{r.error or ''}")
        Path(path).write_text("\n".join(lines) + "\n")


def _run_mode(volumes, mode: str, cfg: RomtConfig, workers) -> tuple:
    """(results, wall_seconds, workers_used); pairs are independent in
    every mode so the modes are numerically comparable."""
    pair_cfg = dataclasses.replace(cfg, chain_mode="parallel")
    n_pairs = len(volumes) - 1
    if mode == "naive":
        n_workers, cache_ops = 1, False
    elif mode == "cached":
        n_workers, cache_ops = 1, True
    elif mode == "cached_parallel":
        n_workers, cache_ops = resolve_workers(workers, n_pairs), True
    else:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    t0 = time.perf_counter()
    results = run_series(volumes, pair_cfg, workers=n_workers,
                         cache_ops=cache_ops)
    return results, time.perf_counter() - t0, n_workers


def scaled_sphere_suite(factors, modes, cfg: RomtConfig,
                        synth: SphereSynthConfig | None = None,
                        workers=None, csv_path=None) -> BenchReport:
    """Sphere-series solves at round(50*factor)^3 for each factor x mode.

    Per-run failures are recorded in the row and the suite continues.
    """
    if synth is None:
        synth = SphereSynthConfig()
    rows = []
    for factor in factors:
        if factor <= 0:
            raise ValueError("factors must be positive")
        scaled = scale_sphere_config(synth, factor)
        volumes = gen_gaussian_spheres(scaled)
        for mode in modes:
            try:
                results, wall, used = _run_mode(volumes, mode, cfg, workers)
                rows.append(BenchRow(
                    factor, scaled.dims, mode, wall,
                    sum(r.gn_iters for r in results),
                    sum(r.pcg_iters_total for r in results),
                    used))
            except Exception as exc:  # keep the suite going
                rows.append(BenchRow(factor, scaled.dims, mode, 0.0, 0, 0,
                                     0, error=str(exc)))
    report = BenchReport(rows)
    if csv_path is not None:
        report.write_csv(csv_path)
    return report


def compare_modes(report: BenchReport, baseline: str = "naive",
                  against: str = "cached") -> list:
    """Percent runtime saving of `against` vs `baseline` per scale factor.

    Scales missing either row (or with errors) are skipped with a note.
    Returns [(scale_factor, saving_pct), ...].
    """
    by_scale: dict = {}
    for r in report.rows:
        if r.error is None:
            by_scale.setdefault(r.scale_factor, {})[r.mode] = r
    out = []
    for factor in sorted(by_scale):
        pair = by_scale[factor]
        if baseline not in pair or against not in pair:
            print(f"compare_modes: scale {factor:g} missing "
                  f"{baseline}/{against} row, skipped")
            continue
        saving = 100.0 * (1.0 - pair[against].wall_seconds
                          / pair[baseline].wall_seconds)
        out.append((factor, saving))
    return out
