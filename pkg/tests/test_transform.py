import numpy as np
import pytest

from fbflow.problem import ProblemData
from fbflow.transform import (DIRICHLET, GAMMA3, INTERIOR, NATURAL, TransformError, build_grid, coefficients,
                              grid_rows, pullback, pushforward)

from conftest import problem, slanted_domain


def test_identity_chart_gives_identity_coefficients():
    grid = build_grid(problem("A"), 0.0, N_w=9, N_s=9)
    co = coefficients(grid)
    assert np.allclose(co.a_hat, np.eye(2), atol=1e-12)
    assert np.allclose(co.h, 1.0)
    assert np.allclose(co.boundary_weight, 1.0)
    assert np.allclose(grid.X[..., 0], grid.w[:, None])
    assert np.allclose(grid.X[..., 1], grid.s[None, :])
    assert all(lbl == "gamma3" for lbl in grid.exit_label)


def test_boundary_tags():
    grid = build_grid(problem("A"), 0.0, N_w=5, N_s=5)
    assert np.all(grid.tags[0] == DIRICHLET) and np.all(grid.tags[-1] == DIRICHLET)
    assert np.all(grid.tags[:, 0] == DIRICHLET)
    assert np.all(grid.tags[1:-1, -1] == GAMMA3)
    assert np.all(grid.tags[1:-1, 1:-1] == INTERIOR)
    grid = build_grid(problem("B"), 0.25, N_w=5, N_s=5)
    assert np.all(grid.tags[0, 1:-1] == NATURAL)


def test_exponential_chart_coefficients():
    grid = build_grid(problem("B"), 0.25, N_w=5, N_s=9)
    co = coefficients(grid)
    x2 = grid.X[..., 1]
    # a = |Y| P^T P with P = diag-swapped inverse of the chart derivative
    assert np.allclose(co.a[..., 0, 0], 1.0 / x2, rtol=1e-8)
    assert np.allclose(co.a[..., 1, 1], x2, rtol=1e-8)
    assert np.allclose(co.a[..., 0, 1], 0.0, atol=1e-8)
    assert np.allclose(co.h, 0.25 * np.exp(grid.t), rtol=1e-8)


def test_P_is_inverse_transpose_of_chart_derivative():
    pd = ProblemData.from_dict(slanted_domain(), {"H1": "0.2*x2", "H2": "1 + 0.3*x1", "beta": "z", "phi": "1"})
    grid = build_grid(pd, 0.25, (0.05, 0.6), N_w=7, N_s=5)
    co = coefficients(grid)
    H1, H2 = pd.H(grid.X[..., 0], grid.X[..., 1])
    DT = np.empty(grid.shape + (2, 2))
    DT[..., 0, 0], DT[..., 1, 0] = H1, H2
    DT[..., 0, 1], DT[..., 1, 1] = grid.Xw[..., 0], grid.Xw[..., 1]
    prod = np.einsum("...ij,...kj->...ik", co.P, DT)
    assert np.allclose(prod, np.eye(2), atol=1e-10)
    assert co.ellipticity > 0


def test_zero_low_mode():
    grid = build_grid(problem("B"), 0.25, N_w=5, N_s=5, t_low_mode="zero")
    assert np.allclose(grid.t[:, 0], 0.0)
    with pytest.raises(TransformError):
        build_grid(problem("B"), 0.25, N_w=5, N_s=5, t_low_mode="middle")


def test_pull_and_push_round_trip():
    grid = build_grid(problem("B"), 0.25, N_w=17, N_s=17)
    vals = pullback(lambda x1, x2: x1 + 2 * x2, grid)
    pts = np.array([[0.3, 0.4], [0.7, 0.9]])
    got = pushforward(vals, grid, pts)
    # bilinear in (s, w) is not exact for x2 = h e^t, but close on a fine grid
    assert got == pytest.approx(pts[:, 0] + 2 * pts[:, 1], abs=2e-3)


def test_grid_rows_shape():
    grid = build_grid(problem("A"), 0.0, N_w=3, N_s=4)
    rows = grid_rows(grid, coefficients(grid))
    assert len(rows) == 12 and all(len(r) == 11 for r in rows)
    assert rows[0][:3] == (0.0, 0.0, 0.0)


def test_metric_uses_the_column_length():
    pd = ProblemData.from_dict(slanted_domain(), {"H1": "0", "H2": "1", "beta": "z", "phi": "1"})
    grid = build_grid(pd, 0.25, N_w=6, N_s=6)
    co = coefficients(grid)
    L = 1.25 - 0.5 * grid.w
    g = grid.s[None, :] * -0.5
    assert np.allclose(grid.length, L, atol=1e-10)
    assert np.allclose(co.a_hat[..., 1, 1], L[:, None], atol=1e-9)
    assert np.allclose(co.a_hat[..., 0, 1], -g, atol=1e-9)
    assert np.allclose(co.a_hat[..., 0, 0], (1 + g ** 2) / L[:, None], atol=1e-9)
