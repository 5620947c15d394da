"""Logically rectangular grid over the orbit chart and the transformed coefficients.

Nodes sit at ``t(w, s) = t_low(w) + s * (alpha_plus(w) - t_low(w))`` for a
uniform ``w`` partition and a uniform ``s`` partition of ``[0, 1]``.  The
coefficients are returned both in the chart variables ``(t, w)`` and in the
computational variables ``(s, w)`` used by the finite-element assembly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exprlang import Expr, compile_expr
from .flow import Exit, FlowChart, FlowError, IntegratorOptions
from .problem import ProblemData

T_LOW_MODES = ("alpha_minus", "zero")

# node tags
INTERIOR, DIRICHLET, GAMMA3, NATURAL = 0, 1, 2, 3
TAG_NAMES = {INTERIOR: "interior", DIRICHLET: "gamma2", GAMMA3: "gamma3", NATURAL: "natural"}


class TransformError(RuntimeError):
    pass


def exit_time_derivative(ex: Exit, Xw: np.ndarray, H: np.ndarray) -> float:
    """``d/dw`` of an exit time: ``-(nu . dX/dw) / (nu . H)``."""
    Hnu = float(np.dot(ex.normal, H))
    if abs(Hnu) <= 1e-12 * max(1.0, float(np.linalg.norm(H))):
        return float("nan")
    return -float(np.dot(ex.normal, Xw)) / Hnu


@dataclass
class CurvilinearGrid:
    """Grid nodes with cached flow data; arrays are indexed ``[j_w, i_s]``."""

    chart: FlowChart
    t_low_mode: str
    w: np.ndarray
    s: np.ndarray
    t: np.ndarray
    X: np.ndarray
    Xw: np.ndarray
    Y: np.ndarray
    alpha_plus: np.ndarray
    alpha_minus: np.ndarray
    t_low: np.ndarray
    d_alpha_plus: np.ndarray
    d_t_low: np.ndarray
    exit_label: list
    exit_on_gamma3: np.ndarray
    tags: np.ndarray

    @property
    def h(self) -> float:
        return self.chart.h

    @property
    def pd(self) -> ProblemData:
        return self.chart.pd

    @property
    def shape(self) -> tuple[int, int]:
        return self.t.shape

    @property
    def length(self) -> np.ndarray:
        """Column length ``alpha_plus - t_low``."""
        return self.alpha_plus - self.t_low

    @property
    def spacing(self) -> float:
        nw, ns = self.shape
        return max(1.0 / (ns - 1), 1.0 / (nw - 1))

    @property
    def dirichlet(self) -> np.ndarray:
        return self.tags == DIRICHLET

    def gamma3_faces(self) -> np.ndarray:
        """Mask over the ``N_w - 1`` faces at ``s = 1`` lying on the transformed gamma3."""
        e = self.exit_on_gamma3
        return e[:-1] & e[1:]

    def column_s(self, w: float, t: float) -> float:
        orb = self.chart.orbit(w)
        lo = orb.alpha_minus if self.t_low_mode == "alpha_minus" else 0.0
        return (t - lo) / (orb.alpha_plus - lo)

    def interpolate(self, values: np.ndarray, w: float, s: float) -> float:
        """Bilinear interpolation of nodal ``values`` at computational point ``(s, w)``."""
        nw, ns = self.shape
        x = (w - self.w[0]) / (self.w[-1] - self.w[0]) * (nw - 1)
        y = np.clip(s, 0.0, 1.0) * (ns - 1)
        j = int(min(max(np.floor(x), 0), nw - 2))
        i = int(min(max(np.floor(y), 0), ns - 2))
        fx, fy = x - j, y - i
        v = values
        return float((1 - fx) * (1 - fy) * v[j, i] + fx * (1 - fy) * v[j + 1, i]
                     + (1 - fx) * fy * v[j, i + 1] + fx * fy * v[j + 1, i + 1])


def build_grid(pd: ProblemData, h: float, w_range: Sequence[float] | None = None,
               N_w: int = 65, N_s: int = 65, t_low_mode: str = "alpha_minus",
               options: IntegratorOptions | None = None, chart: FlowChart | None = None) -> CurvilinearGrid:
    if t_low_mode not in T_LOW_MODES:
        raise TransformError(f"t_low_mode must be one of {T_LOW_MODES}")
    if N_w < 2 or N_s < 2:
        raise TransformError("the grid needs at least two nodes per direction")
    if chart is None:
        chart = FlowChart(pd, h, w_range, options)
    dom = pd.domain
    lo, hi = chart.w_range
    ws = np.linspace(lo, hi, N_w)
    ss = np.linspace(0.0, 1.0, N_s)
    t = np.empty((N_w, N_s))
    st = np.empty((N_w, N_s, 5))
    ap, am, tl = np.empty(N_w), np.empty(N_w), np.empty(N_w)
    dap, dtl = np.empty(N_w), np.empty(N_w)
    labels, on3 = [], np.zeros(N_w, dtype=bool)
    tags = np.full((N_w, N_s), INTERIOR, dtype=np.int8)
    band = 1e-8 * dom.diameter
    for j, w in enumerate(ws):
        try:
            orb = chart.orbit(w)
        except FlowError as exc:
            raise TransformError(f"column w={w}: {exc}") from exc
        ex = orb.exit_plus
        if ex.tangential:
            raise TransformError(f"column w={w}: tangential exit at {ex.point.tolist()}")
        ap[j], am[j] = orb.alpha_plus, orb.alpha_minus
        tl[j] = orb.alpha_minus if t_low_mode == "alpha_minus" else 0.0
        L = ap[j] - tl[j]
        if L <= 1e-12 * max(1.0, abs(ap[j])):
            raise TransformError(f"column w={w} is degenerate (alpha_plus = {ap[j]:.3e})")
        t[j] = tl[j] + ss * L
        st[j] = orb.state(t[j])
        Hp = np.asarray(pd.H(float(ex.point[0]), float(ex.point[1])))
        dap[j] = exit_time_derivative(ex, orb.Xw(ex.time), Hp)
        if t_low_mode == "alpha_minus":
            em = orb.exit_minus
            Hm = np.asarray(pd.H(float(em.point[0]), float(em.point[1])))
            dtl[j] = exit_time_derivative(em, orb.Xw(em.time), Hm)
            if not np.isfinite(dtl[j]):
                dtl[j] = 0.0
        else:
            dtl[j] = 0.0
        labels.append(ex.label)
        on3[j] = ex.label == "gamma3"
        # boundary tags: gamma2 dominates, then the column exit, then other boundary contact
        for i in range(N_s):
            near = dom.labels_near(st[j, i, :2], tol=band) if (i in (0, N_s - 1) or j in (0, N_w - 1)) else set()
            if "gamma2" in near:
                tags[j, i] = DIRICHLET
            elif i == N_s - 1:
                tags[j, i] = {"gamma3": GAMMA3, "gamma2": DIRICHLET}.get(ex.label, NATURAL)
            elif near or i == 0 or j in (0, N_w - 1):
                tags[j, i] = NATURAL
    Y = -np.array([chart.orbit(w).H2_start for w in ws])[:, None] * np.exp(st[..., 4])
    if np.any(~np.isfinite(Y)) or np.any(Y >= 0):
        raise TransformError("the chart Jacobian must be negative and finite at every node")
    return CurvilinearGrid(chart, t_low_mode, ws, ss, t, st[..., :2].copy(), st[..., 2:4].copy(), Y,
                           ap, am, tl, dap, dtl, labels, on3, tags)


@dataclass
class TransformedCoefficients:
    """Nodewise coefficients of the transformed problem.

    ``a`` and ``P`` live in the chart variables ``(t, w)``; ``a_hat`` is the
    same form written in ``(s, w)``, in which the drift is ``chi * h * (1, 0)``.
    """

    P: np.ndarray
    a: np.ndarray
    h: np.ndarray
    mu: np.ndarray
    alpha_plus_prime: np.ndarray
    a_hat: np.ndarray
    boundary_weight: np.ndarray
    H_nu_exit: np.ndarray
    ellipticity: float
    e_t: tuple = (1.0, 0.0)

    def lam(self, grid: CurvilinearGrid, z) -> np.ndarray:
        """Transformed boundary law ``mu(w) * beta(X(alpha_plus(w), w), z)`` per column."""
        Xe = grid.X[:, -1]
        return self.mu * grid.pd.beta_at(Xe[:, 0], Xe[:, 1], z)


def coefficients(grid: CurvilinearGrid, pd: ProblemData | None = None) -> TransformedCoefficients:
    pd = grid.pd if pd is None else pd
    Y = grid.Y
    if np.any(np.abs(Y) < 1e-14):
        raise TransformError("chart degenerate: |Y_h| below 1e-14")
    X, Xw = grid.X, grid.Xw
    H1, H2 = pd.H(X[..., 0], X[..., 1])
    P = np.empty(Y.shape + (2, 2))
    P[..., 0, 0], P[..., 0, 1] = Xw[..., 1], -H2
    P[..., 1, 0], P[..., 1, 1] = -Xw[..., 0], H1
    P /= Y[..., None, None]
    A = pd.a_matrix(X[..., 0], X[..., 1])
    absY = np.abs(Y)
    a = absY[..., None, None] * np.einsum("...ki,...kl,...lj->...ij", P, A, P)
    # mu and the boundary weight per unit w on columns leaving through gamma3
    nw = len(grid.w)
    mu = np.full(nw, np.nan)
    app = np.full(nw, np.nan)
    Hnu = np.full(nw, np.nan)
    weight = np.zeros(nw)
    for j, w in enumerate(grid.w):
        if not grid.exit_on_gamma3[j]:
            continue
        ex = grid.chart.orbit(w).exit_plus
        Hn = float(np.dot(pd.H(float(ex.point[0]), float(ex.point[1])), ex.normal))
        Hnu[j] = Hn
        app[j] = grid.chart.alpha_plus_prime(w)
        mu[j] = grid.chart.mu(w)
        weight[j] = mu[j] * np.sqrt(1.0 + app[j] ** 2)
    # metric of (s, w) -> (t, w)
    L = grid.length[:, None]
    g = (1.0 - grid.s)[None, :] * grid.d_t_low[:, None] + grid.s[None, :] * grid.d_alpha_plus[:, None]
    Jinv = np.zeros(Y.shape + (2, 2))
    Jinv[..., 0, 0] = 1.0 / L
    Jinv[..., 0, 1] = -g / L
    Jinv[..., 1, 1] = 1.0
    a_hat = L[..., None, None] * np.einsum("...ik,...kl,...jl->...ij", Jinv, a, Jinv)
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    ell = float(np.min(np.linalg.eigvalsh(sym)[..., 0]))
    if ell <= 0:
        raise TransformError(f"transformed matrix is not elliptic (smallest eigenvalue {ell:.3e})")
    return TransformedCoefficients(P, a, absY, mu, app, a_hat, weight, Hnu, ell)


# ----------------------------------------------------------------------------
# Composition with the chart
# ----------------------------------------------------------------------------

def _as_callable(f) -> Callable:
    if isinstance(f, Expr):
        fn = compile_expr(f)
        return lambda x1, x2: np.broadcast_to(fn(x1, x2, None, None), np.shape(x1)).astype(float)
    if callable(f):
        return f
    c = float(f)
    return lambda x1, x2: np.full(np.shape(x1), c)


def pullback(f, grid: CurvilinearGrid) -> np.ndarray:
    """Nodal values of ``f o T_h``."""
    fn = _as_callable(f)
    return np.asarray(fn(grid.X[..., 0], grid.X[..., 1]), dtype=float)


def pushforward(values: np.ndarray, grid: CurvilinearGrid, points: np.ndarray) -> np.ndarray:
    """Values at physical ``points`` of the nodal field ``values`` composed with the chart inverse."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty(len(pts))
    for k, p in enumerate(pts):
        try:
            t, w = grid.chart.inverse(p)
        except FlowError as exc:
            raise TransformError(str(exc)) from exc
        out[k] = grid.interpolate(values, w, grid.column_s(w, t))
    return out


def grid_rows(grid: CurvilinearGrid, co: TransformedCoefficients) -> list[tuple]:
    """Rows ``(w, s, t, x1, x2, h, a11, a12, a21, a22, mu)``."""
    rows = []
    nw, ns = grid.shape
    for j in range(nw):
        for i in range(ns):
            a = co.a[j, i]
            rows.append((grid.w[j], grid.s[i], grid.t[j, i], grid.X[j, i, 0], grid.X[j, i, 1], co.h[j, i],
                         a[0, 0], a[0, 1], a[1, 0], a[1, 1], co.mu[j]))
    return [tuple(float(v) for v in r) for r in rows]
