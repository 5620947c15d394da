"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL ...`` line so the run log
doubles as the acceptance summary.
"""
import hashlib
import json
import shutil

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from fbflow.analysis import check_monotonicity, dry_region_chi_law, modulus_report
from fbflow.flow import FlowChart
from fbflow.io import parse_config, run
from fbflow.problem import ProblemData
from fbflow.solver import residuals

from conftest import CASES, JACOBIAN_FIELDS, RESOLUTIONS, case_config, profiled, slanted_domain, solved

RUNS = [(name, n) for name in ("A", "B", "C", "V") for n in RESOLUTIONS]


def announce(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def _chart(name):
    fields, _, wr = JACOBIAN_FIELDS[name]
    return FlowChart(ProblemData.from_dict(slanted_domain(), fields), 0.25, wr)


def _random_chart_points(chart, rng, n_orbits, per_orbit):
    lo, hi = chart.w_range
    pts = []
    for w in rng.uniform(lo, hi, n_orbits):
        orb = chart.orbit(w)
        for t in rng.uniform(orb.alpha_minus, orb.alpha_plus, per_orbit):
            pts.append((float(t), float(w)))
    return pts


# ----------------------------------------------------------------------------
# 1. Jacobian law
# ----------------------------------------------------------------------------

def test_c1_jacobian_law(capsys):
    rng = np.random.default_rng(1)
    worst_closed = worst_other = 0.0
    d = 1e-4
    for name, (_, exact, _) in JACOBIAN_FIELDS.items():
        chart = _chart(name)
        for t, w in _random_chart_points(chart, rng, 200, 1):
            ref = exact(w, t, chart.h)
            closed = float(chart.jacobian_closed(w, t))
            direct = float(chart.jacobian_direct(w, t))
            Xt = (chart(t + d, w) - chart(t - d, w)) / (2 * d)
            Xw = (chart(t, w + d) - chart(t, w - d)) / (2 * d)
            fd = Xt[0] * Xw[1] - Xt[1] * Xw[0]
            worst_closed = max(worst_closed, abs(closed - ref) / abs(ref))
            worst_other = max(worst_other, abs(direct - closed) / abs(closed), abs(fd - closed) / abs(closed))
    ok = worst_closed <= 1e-8 and worst_other <= 1e-6
    announce(capsys, 1, ok, f"closed-form rel err {worst_closed:.2e} (<=1e-8), "
                            f"direct/fd rel err {worst_other:.2e} (<=1e-6)")
    assert ok


# ----------------------------------------------------------------------------
# 2. Chart round trip
# ----------------------------------------------------------------------------

@pytest.mark.slow
def test_c2_round_trip(capsys):
    rng = np.random.default_rng(2)
    worst = 0.0
    for name in JACOBIAN_FIELDS:
        chart = _chart(name)
        diam = chart.pd.domain.diameter
        pts = _random_chart_points(chart, rng, 100, 5)
        for t, w in pts:
            t2, w2 = chart.inverse(chart(t, w))
            worst = max(worst, np.hypot(t2 - t, w2 - w) / diam)
    ok = worst <= 1e-9
    announce(capsys, 2, ok, f"max |T^-1(T(t,w)) - (t,w)| / diameter = {worst:.2e} (<=1e-9) over 3x500 points")
    assert ok


# ----------------------------------------------------------------------------
# 3. Derivative of the exit time
# ----------------------------------------------------------------------------

def test_c3_alpha_plus_prime(capsys):
    worst = 0.0
    d = 1e-3
    for name, (_, _, (lo, hi)) in JACOBIAN_FIELDS.items():
        chart = _chart(name)
        for w in np.linspace(lo + 2 * d, hi - 2 * d, 100):
            assert chart.orbit(w).exit_plus.label == "gamma3"
            a = [chart.alpha_plus(w + k * d) for k in (-2, -1, 1, 2)]
            fd = (a[0] - 8 * a[1] + 8 * a[2] - a[3]) / (12 * d)
            worst = max(worst, abs(fd - chart.alpha_plus_prime(w)))
    ok = worst <= 1e-6
    announce(capsys, 3, ok, f"max |alpha_plus' - central FD| = {worst:.2e} (<=1e-6) on 3x100 columns")
    assert ok


# ----------------------------------------------------------------------------
# 4. Identity transform against a physical-coordinate discretization
# ----------------------------------------------------------------------------

def _physical_q1(n):
    """Q1 matrices on the uniform unit-square mesh, node index ``j * n + i`` with ``x1 = j / (n - 1)``."""
    dx = 1.0 / (n - 1)
    ones = np.ones(n)
    K1 = sp.diags([-ones[1:], 2 * ones, -ones[1:]], [-1, 0, 1]).tolil() / dx
    K1[0, 0] = K1[-1, -1] = 1.0 / dx
    M1 = sp.diags([ones[1:], 4 * ones, ones[1:]], [-1, 0, 1]).tolil() * dx / 6
    M1[0, 0] = M1[-1, -1] = dx / 3
    # C1[a, b] = int N_b N_a' dx
    C1 = sp.lil_matrix((n, n))
    for e in range(n - 1):
        for b in (e, e + 1):
            C1[e, b] -= 0.5
            C1[e + 1, b] += 0.5
    top = sp.lil_matrix((n, n))
    top[-1, -1] = 1.0
    K = sp.kron(K1, M1) + sp.kron(M1, K1)
    drift = sp.kron(M1, C1)          # int chi d(xi)/dx2 for H = (0, 1)
    Mb = sp.kron(M1, top)            # mass on x2 = 1
    return K.tocsr(), drift.tocsr(), Mb.tocsr()


def _physical_solution(n, phi):
    """Solution of the unit-square problem with beta(z) = z in physical coordinates.

    Columns are vertical orbits; the dry law there is ``chi = beta(phi) / (H . nu) = phi``,
    clipped to 1, and the wet region is everything once ``phi >= 1``.
    """
    K, drift, Mb = _physical_q1(n)
    x1, x2 = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    dirichlet = ((x1 == 0) | (x1 == 1) | (x2 == 0)).ravel()
    chi = np.full(n * n, min(phi, 1.0))
    A = (K + Mb).tolil()
    b = Mb @ np.full(n * n, phi) - drift @ chi
    for k in np.flatnonzero(dirichlet):
        A.rows[k], A.data[k] = [k], [1.0]
        b[k] = 0.0
    u = spsolve(A.tocsr(), b)
    assert np.all(u >= -1e-14)
    if phi < 1.0:
        # u = 0 means every column is dry, which is what chi = phi encodes
        assert np.max(np.abs(u)) <= 1e-12
    return u, chi


def test_c4_identity_transform_oracle(capsys):
    n = 33
    worst = 0.0
    cases = {"A": 0.2, "V": 1.5}
    for name, phi in cases.items():
        grid, _, pair = solved(name, n)
        xs = np.linspace(0, 1, n)
        assert np.allclose(grid.X[..., 0], xs[:, None], atol=1e-12)
        assert np.allclose(grid.X[..., 1], xs[None, :], atol=1e-12)
        u_ref, chi_ref = _physical_solution(n, phi)
        scale = max(1.0, float(np.max(np.abs(u_ref))))
        worst = max(worst, float(np.max(np.abs(pair.u - u_ref))) / scale,
                    float(np.max(np.abs(pair.chi - chi_ref))))
    ok = worst <= 1e-10
    announce(capsys, 4, ok, f"max nodal difference to the physical discretization = {worst:.2e} (<=1e-10); "
                            f"phi = 0.2 (spec case) and phi = 1.5 (wet case)")
    assert ok


# ----------------------------------------------------------------------------
# 5, 6, 9. Properties of every acceptance run
# ----------------------------------------------------------------------------

def test_c5_complementarity_and_bounds(capsys):
    worst, lowest = 0.0, 0.0
    for name, n in RUNS:
        _, _, pair = solved(name, n)
        assert pair.converged and not pair.lcp_flagged
        unorm = float(np.max(np.abs(pair.u)))
        defect = float(np.max(np.abs(pair.u * (1 - pair.chi)))) / unorm if unorm > 0 else 0.0
        worst = max(worst, defect)
        lowest = min(lowest, float(pair.u.min()), float(pair.chi.min()), float(1 - pair.chi.max()))
    ok = worst <= 1e-8 and lowest >= 0.0
    announce(capsys, 5, ok, f"max |u(1-chi)|/|u| = {worst:.2e} (<=1e-8), min(u, chi, 1-chi) = {lowest:.2e} "
                            f"over {len(RUNS)} runs")
    assert ok


def test_c6_monotonicity(capsys):
    worst_weak, worst_jump = np.inf, 0.0
    for name, n in RUNS:
        grid, _, pair = solved(name, n)
        rep = check_monotonicity(pair, grid, n_bumps=50, seed=6)
        worst_weak = min(worst_weak, rep.min_bump_integral)
        worst_jump = max(worst_jump, rep.max_forward_jump)
    ok = worst_weak >= -1e-8
    announce(capsys, 6, ok, f"min weak derivative integral {worst_weak:.2e} (>=-1e-8), "
                            f"max forward jump {worst_jump:.2e} over {len(RUNS)} runs")
    assert ok


def test_c9_weak_residual(capsys):
    worst_res, worst_sign = 0.0, np.inf
    for name, n in RUNS:
        _, system, pair = solved(name, n)
        res = residuals(pair, system, band_cells=3)
        worst_res = max(worst_res, res["weak_residual_interior"])
        worst_sign = min(worst_sign, res["sign_check_min"])
    ok = worst_res <= 1e-7 and worst_sign >= -1e-8
    announce(capsys, 9, ok, f"interior weak residual {worst_res:.2e} (<=1e-7 scale), "
                            f"sign check min {worst_sign:.2e} (>=-1e-8) over {len(RUNS)} runs")
    assert ok


# ----------------------------------------------------------------------------
# 7. Dry-region law
# ----------------------------------------------------------------------------

def test_c7_dry_region_law(capsys):
    hs, rs = [], []
    for n in RESOLUTIONS:
        grid, system, pair = solved("B", n)
        rep = dry_region_chi_law(pair, grid, system)
        assert rep.block_nodes > 0
        hs.append(rep.spacing)
        rs.append(rep.block_residual)
    order = float(np.polyfit(np.log(hs), np.log(rs), 1)[0])
    ok = order >= 1.7
    announce(capsys, 7, ok, f"dry-block residuals {', '.join(f'{r:.2e}' for r in rs)}; "
                            f"measured order {order:.2f} (>=1.7)")
    assert ok


# ----------------------------------------------------------------------------
# 8. Continuity witness and its failure mode
# ----------------------------------------------------------------------------

def test_c8_continuity_witness(capsys, tmp_path):
    profiles, margins = [], []
    for n in RESOLUTIONS:
        profile, crit = profiled("C", n)
        assert len(crit) == n
        margins.append(min(c["margin"] for c in crit))
        profiles.append(profile)
    mod = modulus_report(profiles)
    ok_a = min(margins) >= 0.5 and all(c["holds"] for n in RESOLUTIONS for c in profiled("C", n)[1]) \
        and mod["witness"]

    clamps = []
    flagged = []
    for n in RESOLUTIONS:
        _, _, pair = solved("V", n)
        _, crit = profiled("V", n)
        clamps.append(pair.clamp_events)
        flagged.append(not all(c["holds"] for c in crit))
    cfg = parse_config(case_config("V", 33, tmp_path / "v"))
    report = run(cfg, "check-continuity")
    entry = [c for c in report.checks if c["name"] == "continuity_criterion"]
    ok_b = (all(c > 0 for c in clamps) and all(flagged) and len(entry) == 1 and not entry[0]["passed"]
            and report.analysis["continuity"]["criterion_failed"])
    announce(capsys, "8a", ok_a, f"min margin {min(margins):.3f} (>=0.5); normalized jumps "
                                 f"{', '.join(f'{j:.4f}' for j in mod['max_normalized_jump'])} within factor 2")
    announce(capsys, "8b", ok_b, f"violation case: clamp events {clamps}, criterion flagged failed "
                                 f"at every resolution and in the run report")
    assert ok_a and ok_b


# ----------------------------------------------------------------------------
# 10. Determinism
# ----------------------------------------------------------------------------

def _hashes(directory):
    return json.loads((directory / "report.json").read_text())["artifacts"]


def test_c10_determinism(capsys, tmp_path):
    same = True
    count = 0
    for name in CASES:
        out = tmp_path / name
        cfg = parse_config(case_config(name, 33, out))
        first = run(cfg, "all")
        h1 = _hashes(out)
        on_disk = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in out.iterdir()
                   if p.name != "report.json"}
        shutil.rmtree(out)
        second = run(cfg, "all")
        same &= h1 == _hashes(out) == on_disk and first.exit_code == second.exit_code == 0
        count += len(h1)
    announce(capsys, 10, same, f"repeated `all` runs on {len(CASES)} configs gave identical hashes "
                               f"for {count} artifacts")
    assert same
