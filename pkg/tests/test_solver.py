import itertools
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from fbflow.geometry import rectangle
from fbflow.problem import ProblemData
from fbflow.solver import (SolverParams, assemble, chi_from_top, dry_law, interface_band, outer_fixed_point,
                           reconstruct_chi, regularized_extent, residuals, solve_lcp, support_threshold)
from fbflow.transform import build_grid, coefficients

from conftest import solved


def brute_force_lcp(A, b, free):
    """Enumerate active sets of a tiny LCP (unique for a P-matrix)."""
    n = len(b)
    idx = np.flatnonzero(free)
    for r in range(len(idx) + 1):
        for S in itertools.combinations(idx, r):
            S = list(S)
            u = np.zeros(n)
            if S:
                u[S] = np.linalg.solve(A[np.ix_(S, S)], b[S])
            w = A @ u - b
            if np.all(u >= -1e-12) and np.all(w[free] >= -1e-10):
                return u
    raise AssertionError("no solution found")


@st.composite
def m_matrix_lcp(draw):
    n = draw(st.integers(2, 6))
    off = np.array(draw(st.lists(st.floats(0.1, 1.0), min_size=n - 1, max_size=n - 1)))
    diag = np.zeros(n)
    diag[:-1] += off
    diag[1:] += off
    diag += np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n)))
    A = np.diag(diag) - np.diag(off, 1) - np.diag(off, -1)
    b = np.array(draw(st.lists(st.floats(-2, 2), min_size=n, max_size=n)))
    free = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    return A, b, free


@settings(max_examples=80, deadline=None)
@given(m_matrix_lcp(), st.booleans())
def test_lcp_matches_active_set_enumeration(data, warm):
    A, b, free = data
    ref = brute_force_lcp(A, b, free)
    res = solve_lcp(sp.csr_matrix(A), b, free, omega=1.3, tol=1e-13, cap_factor=4000, warm_start=warm)
    assert res.converged
    assert res.u == pytest.approx(ref, abs=1e-9)
    assert np.all(res.u[~free] == 0.0)


def test_solver_params_ranges():
    with pytest.raises(ValueError):
        SolverParams(omega=0.0)
    with pytest.raises(ValueError):
        SolverParams(omega=1.5)
    with pytest.raises(ValueError):
        SolverParams(sor_omega=2.0)
    with pytest.raises(ValueError):
        SolverParams(method="newton")
    assert SolverParams().omega == 0.5


def gravity_case(phi, n=33):
    pd = ProblemData.from_dict(rectangle(0, 1, 0.25, 1, left="neutral", right="neutral"),
                               {"H1": "0", "H2": "x2", "beta": "z", "phi": str(phi)})
    grid = build_grid(pd, 0.25, N_w=5, N_s=n)
    system = assemble(grid, coefficients(grid))
    return grid, system


@pytest.mark.parametrize("phi", [0.5, 0.3, 0.27])
def test_one_dimensional_interface_height(phi):
    # the columns decouple; u = phi - Phi at the top and the interface solves phi - Phi = -(Phi - 0.25) / 2
    # whenever the interface lies below the top, which gives Phi = 2 phi - 0.25
    expected = 2 * phi - 0.25
    grid, system = gravity_case(phi, 65)
    pair = outer_fixed_point(system)
    assert pair.converged
    x2 = grid.X[2, :, 1]
    k = int(pair.top_wet[2])
    assert x2[k] <= expected + 1e-9
    assert x2[k + 1] >= expected - 1e-9 if k + 1 < len(x2) else True
    assert abs(x2[k] - expected) <= (x2[1] - x2[0]) * 4.0 + 1e-12


def test_damped_method_has_a_false_fixed_point():
    # the plain damped iteration stalls with every column wet, far above the interface at x2 = 0.35
    grid, system = gravity_case(0.3, 33)
    damped = outer_fixed_point(system, SolverParams(method="damped"))
    search = outer_fixed_point(system, SolverParams(method="search"))
    assert damped.initialization == "damped" and search.initialization == "regularized"
    assert grid.X[2, damped.top_wet[2], 1] > 0.9
    assert abs(grid.X[2, search.top_wet[2], 1] - 0.35) < 0.05


def test_all_dry_identity_case():
    grid, system, pair = solved("A", 33)
    assert np.all(pair.u == 0.0)
    assert np.allclose(pair.chi, 0.2)
    assert np.all(pair.top_wet == -1)
    assert pair.clamp_events == 0


def test_dry_law_and_chi_from_top():
    _, system, _ = solved("V", 33)
    law, clamped = dry_law(system)
    assert np.all(law == 1.0) and np.all(clamped)   # beta(phi) / (H . nu) = 1.5 exceeds one
    top = np.full(33, 10)
    chi, cl = chi_from_top(system, top)
    assert np.all(chi == 1.0)
    assert cl.reshape(33, 33)[:, :11].sum() == 0 and cl.reshape(33, 33)[:, 11:].all()


def test_reconstruction_is_a_fixed_point():
    _, system, pair = solved("B", 33)
    rec = reconstruct_chi(system, pair.u, support_threshold(pair.u, 1e-12), pair.top_wet)
    assert np.array_equal(rec.chi, pair.chi)
    assert np.array_equal(rec.top_wet, pair.top_wet)


def test_regularized_extent_matches_final_support():
    _, system, pair = solved("B", 33)
    ext = regularized_extent(system, pair.u)
    assert ext.converged
    assert np.array_equal(ext.top, pair.top_wet)


def test_interface_band_covers_transitions():
    _, _, pair = solved("C", 33)
    band = interface_band(pair, 2).reshape(pair.shape)
    for j, k in enumerate(pair.top_wet):
        assert band[j, k] and band[j, min(k + 1, 32)]
    assert band.sum() < band.size // 2


def test_residual_report_keys_and_values():
    _, system, pair = solved("B", 33)
    res = residuals(pair, system)
    assert set(res) == {"scale", "weak_residual_interior", "weak_residual_band", "sign_check_min",
                        "gamma2_inequality_residual", "band_cells", "complementarity_defect"}
    assert res["weak_residual_interior"] < 1e-10
    assert res["complementarity_defect"] == 0.0
    assert res["gamma2_inequality_residual"] <= 0.0


def test_outer_iteration_trace():
    _, _, pair = solved("C", 33)
    assert pair.trace[0]["phase"] == "initial"
    assert all(t["phase"] == "damped" for t in pair.trace[1:])
    last = pair.trace[-1]
    assert last["delta_chi"] <= 1e-8
    assert set(last) == {"iteration", "phase", "delta_chi", "delta_u", "u_max", "sweeps", "lcp_residual",
                         "wet_columns", "clamps"}
    assert math.isfinite(pair.extent_eps)
