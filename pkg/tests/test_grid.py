"""Grid geometry, Laplacian stencil, gradient, and trilinear sampling."""

import numpy as np
import pytest

from romt.grid import (
    Grid,
    VectorField,
    Volume,
    build_neg_laplacian,
    gradient_field,
    linear_index,
    trilinear_sample,
)


def brute_laplacian(grid, sigma):
    """Independent 7-point Neumann stencil, assembled voxel by voxel."""
    nx, ny, nz = grid.dims
    w = sigma / grid.spacing**2
    q = np.zeros((grid.n, grid.n))
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                row = i + nx * j + nx * ny * k
                for di, dj, dk in [(1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
                    ii, jj, kk = i + di, j + dj, k + dk
                    if 0 <= ii < nx and 0 <= jj < ny and 0 <= kk < nz:
                        col = ii + nx * jj + nx * ny * kk
                        q[row, col] += w
                        q[row, row] -= w
    return q


def brute_trilinear(data3d, point):
    dims = data3d.shape
    out = 0.0
    base = []
    frac = []
    for ax in range(3):
        p = min(max(point[ax], 0.0), dims[ax] - 1.0)
        b = min(int(np.floor(p)), dims[ax] - 2)
        base.append(b)
        frac.append(p - b)
    for ox in (0, 1):
        for oy in (0, 1):
            for oz in (0, 1):
                w = ((frac[0] if ox else 1 - frac[0])
                     * (frac[1] if oy else 1 - frac[1])
                     * (frac[2] if oz else 1 - frac[2]))
                out += w * data3d[base[0] + ox, base[1] + oy, base[2] + oz]
    return out


def test_grid_validation():
    g = Grid((3, 4, 5), spacing=0.5)
    assert g.n == 60
    with pytest.raises(ValueError):
        Grid((1, 4, 4))
    with pytest.raises(ValueError):
        Grid((4, 4, 4), spacing=0.0)
    with pytest.raises(ValueError):
        Grid((4, 4, 4), dt=-1.0)


def test_linear_index_roundtrip():
    g = Grid((3, 4, 5))
    seen = set()
    for k in range(5):
        for j in range(4):
            for i in range(3):
                seen.add(linear_index(i, j, k, g))
    assert seen == set(range(g.n))
    assert linear_index(1, 0, 0, g) == 1          # x fastest
    assert linear_index(0, 1, 0, g) == 3
    assert linear_index(0, 0, 1, g) == 12
    with pytest.raises(IndexError):
        linear_index(3, 0, 0, g)
    with pytest.raises(IndexError):
        linear_index(0, -1, 0, g)


def test_volume_layout_and_validation():
    g = Grid((2, 3, 2))
    arr = np.arange(g.n, dtype=float).reshape(g.dims, order="F")
    vol = Volume.from_3d(g, arr)
    assert np.array_equal(vol.data, np.arange(g.n))
    assert np.array_equal(vol.as_3d(), arr)
    with pytest.raises(ValueError):
        Volume(g, np.zeros(g.n + 1))
    vf = VectorField(g, np.arange(3 * g.n, dtype=float))
    assert np.array_equal(vf.component(1), np.arange(g.n, 2 * g.n))
    with pytest.raises(ValueError):
        VectorField(g, np.zeros(g.n))


def test_neg_laplacian_matches_brute_force():
    g = Grid((3, 4, 5), spacing=0.7)
    q = build_neg_laplacian(g, 0.013).toarray()
    assert np.allclose(q, brute_laplacian(g, 0.013), atol=1e-15)


def test_neg_laplacian_row_col_sums_and_symmetry():
    # dyadic sigma/h^2: every entry is exact, so zero sums hold in fp exactly
    q1 = build_neg_laplacian(Grid((4, 3, 5)), 0.25)
    assert np.abs(np.asarray(q1.sum(axis=1))).max() == 0.0
    assert np.abs(np.asarray(q1.sum(axis=0))).max() == 0.0
    assert (q1 - q1.T).nnz == 0
    # non-representable sigma/h^2 leaves only summation roundoff
    q2 = build_neg_laplacian(Grid((4, 3, 5), spacing=0.2), 0.2)
    scale = np.abs(q2.diagonal()).max()
    assert np.abs(np.asarray(q2.sum(axis=1))).max() <= 1e-14 * scale
    assert np.abs(np.asarray(q2.sum(axis=0))).max() <= 1e-14 * scale
    assert (q2 - q2.T).nnz == 0


def test_neg_laplacian_edge_cases():
    g = Grid((3, 3, 3))
    assert build_neg_laplacian(g, 0.0).nnz == 0
    with pytest.raises(ValueError):
        build_neg_laplacian(g, -0.1)
    # interior row of Q applied to a linear profile vanishes
    x = (np.arange(g.n) % 3).astype(float)
    interior = 1 + 3 * 1 + 9 * 1  # voxel (1,1,1)
    assert abs((build_neg_laplacian(g, 1.0) @ x)[interior]) < 1e-14


def test_gradient_field_linear_profile_exact():
    g = Grid((4, 5, 6), spacing=0.5)
    idx = np.arange(g.n)
    i, j, k = idx % 4, (idx // 4) % 5, idx // 20
    rho = Volume(g, 2.0 * i * g.spacing - 1.0 * j * g.spacing + 0.5 * k * g.spacing)
    grad = gradient_field(rho)
    assert np.allclose(grad.component(0), 2.0, atol=1e-13)
    assert np.allclose(grad.component(1), -1.0, atol=1e-13)
    assert np.allclose(grad.component(2), 0.5, atol=1e-13)


def test_gradient_field_matches_loop_oracle():
    rng = np.random.default_rng(7)
    g = Grid((4, 3, 5), spacing=0.3)
    f = rng.random(g.dims)
    grad = gradient_field(Volume.from_3d(g, f))
    gx = grad.component(0).reshape(g.dims, order="F")
    h = g.spacing
    for i in range(4):
        for j in range(3):
            for k in range(5):
                if i == 0:
                    want = (f[1, j, k] - f[0, j, k]) / h
                elif i == 3:
                    want = (f[3, j, k] - f[2, j, k]) / h
                else:
                    want = (f[i + 1, j, k] - f[i - 1, j, k]) / (2 * h)
                assert gx[i, j, k] == pytest.approx(want, abs=1e-14)


def test_trilinear_sample_at_centers_and_oracle():
    rng = np.random.default_rng(11)
    g = Grid((4, 5, 3))
    f = rng.random(g.dims)
    vol = Volume.from_3d(g, f)
    assert trilinear_sample(vol, (2.0, 3.0, 1.0)) == pytest.approx(
        f[2, 3, 1], abs=1e-15)
    pts = rng.uniform(-1.0, 5.5, size=(40, 3))  # includes out-of-hull points
    got = trilinear_sample(vol, pts)
    want = np.array([brute_trilinear(f, p) for p in pts])
    assert np.allclose(got, want, atol=1e-13)


def test_trilinear_sample_vector_field_and_clamping():
    g = Grid((3, 3, 3))
    comps = [np.full(g.n, c + 1.0) for c in range(3)]
    vf = VectorField(g, np.concatenate(comps))
    out = trilinear_sample(vf, np.array([[1.2, 0.4, 2.9], [-5.0, 9.0, 1.0]]))
    assert out.shape == (2, 3)
    assert np.allclose(out, [[1, 2, 3], [1, 2, 3]])
    # clamped point equals sampling at the clamped location
    vol = Volume(g, np.arange(g.n, dtype=float))
    assert trilinear_sample(vol, (-3.0, 1.0, 1.0)) == \
        trilinear_sample(vol, (0.0, 1.0, 1.0))


def test_trilinear_sample_rejects_nan():
    g = Grid((3, 3, 3))
    vol = Volume(g, np.zeros(g.n))
    with pytest.raises(ValueError):
        trilinear_sample(vol, (np.nan, 1.0, 1.0))
