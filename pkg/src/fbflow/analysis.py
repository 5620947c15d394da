"""Free-boundary profile, structural audits and the continuity criterion.

The profile ``Phi(w)`` is the flow time at which a column leaves the wet
region; dry columns carry the backward exit time as a sentinel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow import FlowError
from .problem import ProblemData
from .solver import GAUSS, DiscreteSystem, SolutionPair, _shape, reconstruct_chi, support_threshold
from .transform import CurvilinearGrid


class AnalysisError(RuntimeError):
    pass


def profile_threshold(u: np.ndarray, grid_spacing: float) -> float:
    """Support threshold ``max(1e-10, 1e-3 * spacing**2 * max|u|)``."""
    return max(1e-10, 1e-3 * grid_spacing ** 2 * float(np.max(np.abs(u), initial=0.0)))


# ----------------------------------------------------------------------------
# Profile
# ----------------------------------------------------------------------------

@dataclass
class FreeBoundaryProfile:
    w: np.ndarray
    phi: np.ndarray            # Phi(w); equals alpha_minus on dry columns
    sentinel: np.ndarray       # column carries no node above the threshold
    points: np.ndarray         # physical trace X(Phi(w), w); NaN on sentinel columns
    exit_on_gamma3: np.ndarray
    support_count: np.ndarray  # nodes with u > threshold per column
    below_count: np.ndarray    # nodes with t < Phi per column
    threshold: float
    spacing: float
    criterion: list = field(default_factory=list)

    def rows(self) -> list[tuple]:
        """Rows ``(w, Phi_h, x1, x2, exit_on_gamma3, lhs_35, rhs_35, margin)``."""
        crit = {c["index"]: c for c in self.criterion}
        out = []
        for j, w in enumerate(self.w):
            c = crit.get(j, {})
            out.append((float(w), float(self.phi[j]), float(self.points[j, 0]), float(self.points[j, 1]),
                        int(bool(self.exit_on_gamma3[j])), float(c.get("lhs", np.nan)),
                        float(c.get("rhs", np.nan)), float(c.get("margin", np.nan))))
        return out


def extract_profile(pair: SolutionPair, grid: CurvilinearGrid, threshold: float | None = None) -> FreeBoundaryProfile:
    """Last crossing of ``u`` through the threshold on every column, linearly interpolated."""
    nw, ns = grid.shape
    U = pair.U
    thr = profile_threshold(pair.u, grid.spacing) if threshold is None else float(threshold)
    phi = np.empty(nw)
    sentinel = np.zeros(nw, dtype=bool)
    points = np.full((nw, 2), np.nan)
    count = np.zeros(nw, dtype=int)
    below = np.zeros(nw, dtype=int)
    for j in range(nw):
        col, t = U[j], grid.t[j]
        wet = np.flatnonzero(col > thr)
        count[j] = len(wet)
        if len(wet) == 0:
            phi[j] = grid.alpha_minus[j]
            sentinel[j] = True
            continue
        if wet[-1] - wet[0] + 1 != len(wet):
            raise AnalysisError(f"column w={grid.w[j]:.6g}: support above the threshold is not an interval")
        k = int(wet[-1])
        if k == ns - 1:
            phi[j] = t[k]
        else:
            lam = (col[k] - thr) / (col[k] - col[k + 1])
            phi[j] = t[k] + lam * (t[k + 1] - t[k])
        below[j] = int(np.count_nonzero(t < phi[j]))
        points[j] = grid.chart(phi[j], grid.w[j])
    return FreeBoundaryProfile(grid.w.copy(), phi, sentinel, points, grid.exit_on_gamma3.copy(),
                               count, below, thr, grid.spacing)


def support_identity_defect(profile: FreeBoundaryProfile, grid: CurvilinearGrid) -> int:
    """Largest gap between the support count and the count of nodes with ``t < Phi``.

    Bottom nodes on the Dirichlet part carry ``u = 0`` and are not counted.
    """
    lows = grid.dirichlet[:, 0].astype(int)
    ok = ~profile.sentinel
    if not np.any(ok):
        return 0
    return int(np.max(np.abs(profile.support_count[ok] - (profile.below_count[ok] - lows[ok]))))


# ----------------------------------------------------------------------------
# Monotonicity along orbits
# ----------------------------------------------------------------------------

def _bump(r):
    out = np.zeros_like(r)
    m = np.abs(r) < 1.0
    out[m] = np.exp(-1.0 / (1.0 - r[m] ** 2))
    return out


@dataclass
class MonotonicityReport:
    max_forward_jump: float
    min_bump_integral: float
    n_bumps: int


def check_monotonicity(pair: SolutionPair, grid: CurvilinearGrid, n_bumps: int = 50,
                       seed: int = 0) -> MonotonicityReport:
    """Forward differences of ``chi`` along columns and the weak form of ``d chi / dt <= 0``.

    The weak form evaluates ``int chi * d xi / dt`` over the chart for
    smooth nonnegative bumps ``xi`` supported strictly inside the
    computational rectangle; each value must be nonnegative.  With
    ``dt = L ds`` and ``chi`` continuous and piecewise linear along a
    column, integration by parts gives ``-sum_cells (d chi / ds) int xi ds``
    exactly, which avoids quadrature error on the steep flanks of the bump.
    """
    CHI = pair.CHI
    jump = float(max(np.max(np.diff(CHI, axis=1), initial=0.0), 0.0))
    rng = np.random.default_rng(seed)
    nw, ns = grid.shape
    g, gw = np.polynomial.legendre.leggauss(8)
    g, gw = 0.5 * (g + 1.0), 0.5 * gw
    s_nodes = grid.s
    ds = np.diff(s_nodes)
    sq = s_nodes[:-1, None] + ds[:, None] * g[None, :]
    w_lo, w_hi = float(grid.w[0]), float(grid.w[-1])
    wts_w = np.full(nw, (w_hi - w_lo) / (nw - 1))
    wts_w[[0, -1]] *= 0.5
    slope = np.diff(CHI, axis=1) / ds[None, :]
    width = w_hi - w_lo
    worst = np.inf
    for _ in range(n_bumps):
        rs = rng.uniform(0.05, 0.4)
        rw = rng.uniform(0.05, 0.4) * width
        sc = rng.uniform(rs, 1.0 - rs)
        wc = rng.uniform(w_lo + rw, w_hi - rw)
        bw = _bump((grid.w - wc) / rw)
        cell = (_bump((sq - sc) / rs) * gw[None, :]).sum(axis=1) * ds
        val = -float(np.sum(wts_w[:, None] * bw[:, None] * slope * cell[None, :]))
        worst = min(worst, val)
    return MonotonicityReport(jump, float(worst) if n_bumps else 0.0, n_bumps)


# ----------------------------------------------------------------------------
# Dry-region law
# ----------------------------------------------------------------------------

def dry_law_constant(grid: CurvilinearGrid, pd: ProblemData | None = None) -> np.ndarray:
    """Per column ``|Y(alpha_plus)| beta(x, phi(x)) / (H . nu)`` at the exit ``x``; NaN off gamma3."""
    pd = grid.pd if pd is None else pd
    out = np.full(len(grid.w), np.nan)
    for j, w in enumerate(grid.w):
        if not grid.exit_on_gamma3[j]:
            continue
        ex = grid.chart.orbit(w).exit_plus
        x1, x2 = float(ex.point[0]), float(ex.point[1])
        Hnu = float(np.dot(pd.H(x1, x2), ex.normal))
        Ya = abs(float(grid.chart.jacobian_closed(w, ex.time)))
        out[j] = Ya * pd.beta_at(x1, x2, pd.phi_at(x1, x2)) / Hnu
    return out


def dry_law_values(grid: CurvilinearGrid, pd: ProblemData | None = None) -> np.ndarray:
    """Nodal dry-region law ``C(w) / |Y(t, w)|`` (NaN on columns without a gamma3 exit)."""
    return dry_law_constant(grid, pd)[:, None] / np.abs(grid.Y)


def product_flux_load(chi: np.ndarray, h: np.ndarray, ds: float, dw: float) -> np.ndarray:
    """``int (I chi)(I h) dN_i/ds`` on the ``(s, w)`` rectangle, both factors interpolated separately."""
    nw, ns = chi.shape
    R = np.zeros((nw, ns))
    # local node k sits at s offset [0, 1, 0, 1][k] and w offset [0, 0, 1, 1][k]
    order = [(0, 0), (0, 1), (1, 0), (1, 1)]
    cs = [chi[oj:nw - 1 + oj, oi:ns - 1 + oi] for oj, oi in order]
    hs = [h[oj:nw - 1 + oj, oi:ns - 1 + oi] for oj, oi in order]
    for xi in GAUSS:
        for eta in GAUSS:
            N, dxi, _ = _shape(xi, eta)
            cq = N[0] * cs[0] + N[1] * cs[1] + N[2] * cs[2] + N[3] * cs[3]
            hq = N[0] * hs[0] + N[1] * hs[1] + N[2] * hs[2] + N[3] * hs[3]
            q = cq * hq * (0.25 * dw)
            for k, (oj, oi) in enumerate(order):
                R[oj:nw - 1 + oj, oi:ns - 1 + oi] += q * dxi[k]
    return R


@dataclass
class DryLawReport:
    formula_mismatch: float
    block_residual: float
    block_nodes: int
    spacing: float
    constant: float             # block_residual / spacing**2
    branch1_max_chi: float      # largest chi on dry nodes of columns leaving off gamma3
    clamped_nodes: int


def dry_region_chi_law(pair: SolutionPair, grid: CurvilinearGrid, sys: DiscreteSystem,
                       pd: ProblemData | None = None, offset: int = 2) -> DryLawReport:
    """Compare ``chi`` with the dry-region law and evaluate the discrete equations there.

    The block holds nodes at least ``offset`` cells above the wet extent of
    the column and of both neighbours.  The residual uses the law's values
    for ``chi`` with ``chi`` and ``|Y|`` interpolated separately, which is
    independent of the nodal flux the solver balances.
    """
    nw, ns = grid.shape
    ds = 1.0 / (ns - 1)
    dw = (grid.w[-1] - grid.w[0]) / (nw - 1)
    C = dry_law_constant(grid, pd)
    law = C[:, None] / np.abs(grid.Y)
    top = pair.top_wet if pair.top_wet is not None else np.full(nw, -1)
    block = np.zeros((nw, ns), dtype=bool)
    for j in range(nw):
        lo = int(np.max(top[max(j - 1, 0):j + 2])) + 1 + offset
        if np.all(grid.exit_on_gamma3[max(j - 1, 0):j + 2]):
            block[j, lo:] = True
    block &= ~grid.dirichlet
    CHI = pair.CHI
    clamped = (law > 1.0) | (law < 0.0)
    check = block & ~clamped
    mismatch = float(np.max(np.abs(CHI[check] - law[check]), initial=0.0))
    chi_law = np.where(np.isfinite(law), np.clip(law, 0.0, 1.0), CHI)
    chi_law = np.where(block, chi_law, CHI)
    u = pair.u
    flux = np.zeros(sys.n)
    idx = sys.boundary_nodes
    if len(idx):
        flux[idx] = sys.W[idx] * sys.beta(idx, sys.phi[idx] - u[idx])
    R = (sys.K @ u - sys.Mb @ flux).reshape(nw, ns) + product_flux_load(chi_law, np.abs(grid.Y), ds, dw)
    norm = dw * float(np.nanmax(np.abs(C))) if np.any(np.isfinite(C)) else dw
    res = float(np.max(np.abs(R[block]), initial=0.0)) / max(norm, 1e-300)
    dry1 = np.zeros((nw, ns), dtype=bool)
    for j in range(nw):
        if not grid.exit_on_gamma3[j]:
            dry1[j, int(top[j]) + 1:] = True
    b1 = float(np.max(CHI[dry1], initial=0.0))
    h = grid.spacing
    return DryLawReport(mismatch, res, int(block.sum()), h, res / h ** 2, b1, int((block & clamped).sum()))


# ----------------------------------------------------------------------------
# Continuity criterion
# ----------------------------------------------------------------------------

def continuity_criterion(profile: FreeBoundaryProfile, grid: CurvilinearGrid, w0: float,
                         pd: ProblemData | None = None) -> dict:
    """Boundary-flux weight at the exit against the Jacobian weight at the free boundary.

    ``lhs = |Y(alpha_plus)| beta(x, phi) / (H . nu)`` at the exit ``x`` and
    ``rhs = |Y(Phi(w0), w0)|``; the criterion holds when ``lhs < rhs``.  The
    signed reading with ``Y`` in place of ``|Y|`` is reported alongside.
    """
    pd = grid.pd if pd is None else pd
    j = int(np.argmin(np.abs(profile.w - w0)))
    if abs(profile.w[j] - w0) > 1e-12 * max(1.0, abs(w0)):
        raise AnalysisError(f"w0={w0} is not a column of the profile")
    if profile.sentinel[j]:
        raise AnalysisError(f"column w={w0:.6g} is dry (sentinel profile value)")
    if not profile.exit_on_gamma3[j]:
        raise AnalysisError(f"column w={w0:.6g} does not leave through gamma3")
    chart = grid.chart
    try:
        ex = chart.orbit(profile.w[j]).exit_plus
    except FlowError as exc:
        raise AnalysisError(str(exc)) from exc
    x1, x2 = float(ex.point[0]), float(ex.point[1])
    Hnu = float(np.dot(pd.H(x1, x2), ex.normal))
    Ya = float(chart.jacobian_closed(profile.w[j], ex.time))
    lhs = abs(Ya) * pd.beta_at(x1, x2, pd.phi_at(x1, x2)) / Hnu
    Yphi = float(chart.jacobian_closed(profile.w[j], profile.phi[j]))
    rhs = abs(Yphi)
    return {"index": j, "w": float(profile.w[j]), "lhs": float(lhs), "rhs": float(rhs),
            "holds": bool(lhs < rhs), "margin": float(rhs - lhs),
            "signed_rhs": Yphi, "signed_holds": bool(lhs < Yphi)}


def criterion_table(profile: FreeBoundaryProfile, grid: CurvilinearGrid, pd: ProblemData | None = None) -> list[dict]:
    """Criterion on every column where it is defined; also stored on the profile."""
    rows = []
    for j, w in enumerate(profile.w):
        if profile.sentinel[j] or not profile.exit_on_gamma3[j]:
            continue
        rows.append(continuity_criterion(profile, grid, float(w), pd))
    profile.criterion = rows
    return rows


def clamp_consistency(pair: SolutionPair, criterion: list[dict]) -> list[int]:
    """Columns where the criterion holds with positive margin yet a clamp fired."""
    if pair.clamped is None:
        return []
    C = pair.clamped.reshape(pair.shape)
    return [c["index"] for c in criterion if c["margin"] > 0 and bool(np.any(C[c["index"]]))]


# ----------------------------------------------------------------------------
# Modulus of the profile
# ----------------------------------------------------------------------------

def normalized_jumps(profile: FreeBoundaryProfile, columns: np.ndarray | None = None) -> float:
    """Largest ``|Phi(w_{i+1}) - Phi(w_i)| / (w_{i+1} - w_i)`` over adjacent non-sentinel columns."""
    ok = ~profile.sentinel if columns is None else (~profile.sentinel & columns)
    pairs = ok[1:] & ok[:-1]
    if not np.any(pairs):
        return 0.0
    d = np.abs(np.diff(profile.phi)) / np.diff(profile.w)
    return float(np.max(d[pairs]))


def modulus_report(profiles: list[FreeBoundaryProfile], factor: float = 2.0) -> dict:
    """Normalized jumps per resolution and the continuity-witness verdict.

    The witness holds when every resolution's jump lies within ``factor`` of
    the coarsest one on columns where the criterion holds.
    """
    if len(profiles) < 2:
        raise AnalysisError("the modulus report needs profiles at two resolutions at least")
    jumps = []
    for pr in profiles:
        cols = None
        if pr.criterion:
            cols = np.zeros(len(pr.w), dtype=bool)
            for c in pr.criterion:
                cols[c["index"]] = c["holds"]
        jumps.append(normalized_jumps(pr, cols))
    ref = jumps[0]
    witness = all(j <= factor * ref + 1e-12 and ref <= factor * j + 1e-12 for j in jumps)
    return {"spacing": [float(pr.spacing) for pr in profiles], "max_normalized_jump": jumps,
            "witness": bool(witness)}


# ----------------------------------------------------------------------------
# Fixed-point certificate
# ----------------------------------------------------------------------------

def reconstruction_change(pair: SolutionPair, sys: DiscreteSystem, floor: float = 1e-12) -> float:
    """Change of ``chi`` when reconstructed once more from the converged pair."""
    rec = reconstruct_chi(sys, pair.u, support_threshold(pair.u, floor), pair.top_wet)
    return float(np.max(np.abs(rec.chi - pair.chi), initial=0.0))
