"""Benchmark harness: suite rows, CSV output, mode comparison."""

import numpy as np
import pytest

from romt.bench import BenchReport, BenchRow, compare_modes, scaled_sphere_suite
from romt.data_io import SphereSynthConfig
from romt.solver import RomtConfig


def _tiny_cfg():
    return RomtConfig(m=2, max_gn_iters=1, pcg_max_iters=3)


def _tiny_synth():
    return SphereSynthConfig(dims=(8, 8, 8), n_frames=2, center=(3.0, 4.0, 4.0),
                             drift=(1.0, 0.0, 0.0), std=1.0, growth=0.0)


def test_suite_rows_and_csv(tmp_path):
    csv_path = tmp_path / "report.csv"
    report = scaled_sphere_suite(
        factors=[1.0], modes=["naive", "cached"], cfg=_tiny_cfg(),
        synth=_tiny_synth(), csv_path=csv_path)
    assert [(r.scale_factor, r.mode) for r in report.rows] == \
        [(1.0, "naive"), (1.0, "cached")]
    for row in report.rows:
        assert row.error is None
        assert row.wall_seconds > 0
        assert row.dims == (8, 8, 8)
        assert row.gn_iters >= 1
        assert row.workers == 1

    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == BenchReport.CSV_HEADER
    assert len(lines) == 3
    assert lines[1].startswith("1,8x8x8,naive,")


def test_suite_records_errors_and_continues():
    report = scaled_sphere_suite(
        factors=[1.0], modes=["hyperspeed", "cached"], cfg=_tiny_cfg(),
        synth=_tiny_synth())
    bad, good = report.rows
    assert bad.error is not None and "hyperspeed" in bad.error
    assert good.error is None


def test_suite_rejects_bad_factor():
    with pytest.raises(ValueError):
        scaled_sphere_suite(factors=[0.0], modes=["cached"], cfg=_tiny_cfg(),
                            synth=_tiny_synth())


def test_compare_modes_arithmetic():
    rows = [
        BenchRow(1.0, (8, 8, 8), "naive", 100.0, 1, 1, 1),
        BenchRow(1.0, (8, 8, 8), "cached", 9.0, 1, 1, 1),
        BenchRow(2.0, (16, 16, 16), "naive", 50.0, 1, 1, 1),
        BenchRow(2.0, (16, 16, 16), "cached", 60.0, 1, 1, 1),
        BenchRow(3.0, (24, 24, 24), "naive", 10.0, 1, 1, 1),  # no cached row
        BenchRow(4.0, (32, 32, 32), "naive", 0.0, 1, 1, 1, error="boom"),
        BenchRow(4.0, (32, 32, 32), "cached", 1.0, 1, 1, 1),
    ]
    out = compare_modes(BenchReport(rows))
    assert [f for f, _ in out] == [1.0, 2.0]
    assert np.isclose(out[0][1], 91.0)
    assert np.isclose(out[1][1], -20.0)
