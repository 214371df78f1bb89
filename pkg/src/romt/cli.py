"""Command-line pipeline: synth -> solve -> pathlines / maps, plus bench.

Exit codes: 0 success, 1 runtime/solver failure (diagnostic on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .bench import MODES, compare_modes, scaled_sphere_suite
from .data_io import (
    SphereSynthConfig,
    export_pathlines,
    gen_gaussian_spheres,
    import_nifti,
    load_volume,
    save_volume,
)
from .grid import Grid, Volume
from .lagrangian import (
    PathlineConfig,
    attach_speed_peclet,
    augmented_velocity,
    build_glyph_set,
    default_log_floor,
    seed_points,
    series_interval_fields,
    trace_pathlines,
)
from .solver import RomtConfig, run_series

_CONFIG_FIELDS = {f.name for f in dataclasses.fields(RomtConfig)}
_RUN_KEYS = {"inputs", "output_dir", "workers", "cache_ops"}


def _triple(text: str):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated values")
    return tuple(parts)


def _load_input_volume(path: Path) -> Volume:
    if path.suffix == ".nii":
        return import_nifti(path)
    return load_volume(path)


def _cmd_synth(args) -> int:
    cfg = SphereSynthConfig(
        dims=tuple(int(d) for d in args.dims), n_frames=args.frames,
        center=args.center, drift=args.drift, std=args.std,
        growth=args.growth, amplitude=args.amplitude)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, vol in enumerate(gen_gaussian_spheres(cfg)):
        save_volume(vol, out / f"frame_{t:03d}.rvol")
        print(f"wrote {out / f'frame_{t:03d}.rvol'}")
    return 0


def _parse_solve_config(path: Path):
    doc = json.loads(path.read_text())
    unknown = set(doc) - _CONFIG_FIELDS - _RUN_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "inputs" not in doc or len(doc["inputs"]) < 2:
        raise ValueError("config needs an 'inputs' list of at least 2 volumes")
    if "output_dir" not in doc:
        raise ValueError("config needs an 'output_dir'")
    cfg = RomtConfig(**{k: doc[k] for k in doc if k in _CONFIG_FIELDS})
    base = path.parent
    inputs = [(base / p if not Path(p).is_absolute() else Path(p))
              for p in doc["inputs"]]
    return cfg, inputs, base / doc["output_dir"] if not Path(
        doc["output_dir"]).is_absolute() else Path(doc["output_dir"]), doc


def _cmd_solve(args) -> int:
    cfg, inputs, out_dir, doc = _parse_solve_config(Path(args.config))
    volumes = [_load_input_volume(p) for p in inputs]
    results = run_series(volumes, cfg, workers=doc.get("workers"),
                         cache_ops=doc.get("cache_ops", True))
    out_dir.mkdir(parents=True, exist_ok=True)

    hist_lines = ["pair,iteration,energy,fit,total"]
    for r, res in enumerate(results):
        np.save(out_dir / f"velocity_pair{r:03d}.npy", res.v_final)
        for j, rho in enumerate(res.rho_interp, start=1):
            save_volume(rho, out_dir / f"interp_pair{r:03d}_step{j:02d}.rvol")
        for it, (energy, fit) in enumerate(res.cost_history):
            hist_lines.append(
                f"{r},{it},{energy:.17g},{fit:.17g},{energy + fit:.17g}")
    (out_dir / "cost_history.csv").write_text("\n".join(hist_lines) + "\n")

    manifest = {
        "config": dataclasses.asdict(cfg),
        "inputs": [str(p.resolve()) for p in inputs],
        "n_pairs": len(results),
        "dims": list(volumes[0].grid.dims),
        "spacing": volumes[0].grid.spacing,
        "stop_reasons": [res.stop_reason for res in results],
        "gn_iters": [res.gn_iters for res in results],
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    print(f"solved {len(results)} pair(s) into {out_dir}")
    return 0


def _load_solution(solve_dir: Path):
    """Rebuild (cfg, input volumes, per-pair results) from solve outputs."""
    manifest = json.loads((solve_dir / "manifest.json").read_text())
    cfg = RomtConfig(**manifest["config"])
    volumes = [_load_input_volume(Path(p)) for p in manifest["inputs"]]
    grid = Grid(tuple(manifest["dims"]), spacing=manifest["spacing"],
                n_intervals=cfg.m, dt=cfg.k_t)
    results = []
    for r in range(manifest["n_pairs"]):
        v_final = np.load(solve_dir / f"velocity_pair{r:03d}.npy")
        interp = [
            Volume(grid, load_volume(
                solve_dir / f"interp_pair{r:03d}_step{j:02d}.rvol").data)
            for j in range(1, cfg.m + 1)
        ]
        results.append(SimpleNamespace(grid=grid, v_final=v_final,
                                       rho_interp=interp))
    return cfg, [Volume(grid, v.data) for v in volumes], results


def _pathline_pipeline(args):
    cfg, volumes, results = _load_solution(Path(args.solve_dir))
    v_series, rho_series = series_interval_fields(volumes, results,
                                                  cfg.chain_mode)
    floor = default_log_floor(volumes + rho_series)
    aug = [augmented_velocity(v, r, cfg.sigma, floor)
           for v, r in zip(v_series, rho_series)]
    pl_cfg = PathlineConfig(n_sub=args.n_sub, prune_threshold=args.prune)
    mask = load_volume(args.mask) if getattr(args, "mask", None) else None
    seeds = seed_points(volumes[0], args.threshold, args.stride, mask)
    lines = trace_pathlines(seeds, aug, pl_cfg)
    lines = attach_speed_peclet(lines, v_series, rho_series, cfg.sigma,
                                floor, n_sub=pl_cfg.n_sub)
    return lines, pl_cfg, volumes[0].grid


def _cmd_pathlines(args) -> int:
    lines, _, _ = _pathline_pipeline(args)
    export_pathlines(lines, args.out, format=args.format)
    print(f"exported {len(lines)} pathlines to {args.out}")
    return 0


def _cmd_maps(args) -> int:
    lines, pl_cfg, grid = _pathline_pipeline(args)
    glyphs = build_glyph_set(lines, grid, pl_cfg.prune_threshold)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(glyphs.speed_map, out / "speed_map.rvol")
    save_volume(glyphs.pe_map, out / "pe_map.rvol")
    flux_lines = ["sx,sy,sz,ex,ey,ez,length"]
    for start, end, length in glyphs.flux_vectors:
        flux_lines.append(",".join(f"{x:.9g}" for x in [*start, *end, length]))
    (out / "flux_vectors.csv").write_text("\n".join(flux_lines) + "\n")
    print(f"wrote speed/Pe maps and {len(glyphs.flux_vectors)} "
          f"flux vectors to {out}")
    return 0


def _cmd_bench(args) -> int:
    cfg = RomtConfig(**json.loads(Path(args.config).read_text())) \
        if args.config else RomtConfig(max_gn_iters=args.gn_iters)
    synth = SphereSynthConfig(n_frames=args.frames)
    report = scaled_sphere_suite(
        factors=args.factors, modes=args.modes, cfg=cfg, synth=synth,
        workers=args.workers, csv_path=args.out)
    for row in report.rows:
        status = row.error or f"{row.wall_seconds:.3f}s"
        print(f"scale {row.scale_factor:g} dims {row.dims} "
              f"mode {row.mode}: {status}")
    for factor, saving in compare_modes(report):
        print(f"scale {factor:g}: cached saves {saving:.1f}% vs naive")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="romt",
        description="Regularized optimal mass transport solver pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a Gaussian-sphere series")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dims", type=_triple, default=(50, 50, 50))
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--center", type=_triple, default=SphereSynthConfig.center)
    p.add_argument("--drift", type=_triple, default=SphereSynthConfig.drift)
    p.add_argument("--std", type=float, default=SphereSynthConfig.std)
    p.add_argument("--growth", type=float, default=SphereSynthConfig.growth)
    p.add_argument("--amplitude", type=float,
                   default=SphereSynthConfig.amplitude)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("solve", help="solve a series from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_solve)

    for name, fn in (("pathlines", _cmd_pathlines), ("maps", _cmd_maps)):
        p = sub.add_parser(name, help=f"compute {name} from solve outputs")
        p.add_argument("--solve-dir", required=True)
        p.add_argument("--threshold", type=float, default=0.1,
                       help="seed at voxels >= threshold * max(rho0)")
        p.add_argument("--stride", type=int, default=1)
        p.add_argument("--n-sub", type=int, default=1, dest="n_sub")
        p.add_argument("--prune", type=float, default=0.5)
        p.add_argument("--mask", default=None,
                       help="binary mask volume restricting seeds")
        if name == "pathlines":
            p.add_argument("--out", required=True)
            p.add_argument("--format", choices=("csv", "vtk_ascii"),
                           default="csv")
        else:
            p.add_argument("--out-dir", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("bench", help="runtime scaling study")
    p.add_argument("--factors", type=lambda s: [float(x) for x in s.split(",")],
                   default=[0.5])
    p.add_argument("--modes", type=lambda s: s.split(","),
                   default=["naive", "cached"],
                   help=f"subset of {','.join(MODES)}")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--gn-iters", type=int, default=4, dest="gn_iters")
    p.add_argument("--config", default=None,
                   help="JSON file of solver parameters")
    p.add_argument("--out", default="bench_report.csv")
    p.set_defaults(func=_cmd_bench)
    return parser


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
