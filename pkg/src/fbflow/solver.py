"""Discrete transformed problem and the outer fixed point for ``(u, chi)``.

Bilinear elements on the computational rectangle ``(s, w)``.  With nodal
``u`` and ``chi`` the discrete identity reads

    K u + D (chi h) = Mb (W beta(x, phi - u))

where ``K`` is the stiffness of the transformed matrix, ``D`` maps the nodal
flux ``q = chi h`` to ``int q dN_i/ds`` and ``Mb`` is the consistent mass of
the faces at ``s = 1`` on the transformed gamma3, carrying the weight ``W``
per unit ``w``.  Both fluxes enter through their nodal interpolants, which
makes the dry-region law balance the discrete equations exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.sparse.linalg import spsolve

from .exprlang import ExprError
from .problem import ProblemData
from .transform import DIRICHLET, INTERIOR, CurvilinearGrid, TransformedCoefficients

_G = 0.5 / math.sqrt(3.0)
GAUSS = np.array([0.5 - _G, 0.5 + _G])


class SolverError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# Bilinear elements on a uniform rectangle
# ----------------------------------------------------------------------------

def _local_node_offsets():
    # local nodes in (s, w): (0,0), (1,0), (0,1), (1,1)
    return np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1])


def _shape(xi: float, eta: float):
    N = np.array([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta])
    dxi = np.array([-(1 - eta), 1 - eta, -eta, eta])
    deta = np.array([-(1 - xi), -xi, 1 - xi, xi])
    return N, dxi, deta


def q1_operators(A: np.ndarray, ds: float, dw: float):
    """Stiffness ``K``, flux operator ``D`` and ``G[i, j] = int N_i dN_j/ds``.

    ``A`` holds the nodal 2x2 matrix in ``(s, w)`` order with shape
    ``(N_w, N_s, 2, 2)``; it is interpolated bilinearly to 2x2 Gauss points.
    """
    nw, ns = A.shape[:2]
    N = nw * ns
    jj, ii = np.meshgrid(np.arange(nw - 1), np.arange(ns - 1), indexing="ij")
    jj, ii = jj.ravel(), ii.ravel()
    oi, oj = _local_node_offsets()
    nodes = (jj[:, None] + oj[None, :]) * ns + (ii[:, None] + oi[None, :])  # (cells, 4)
    Acell = A[jj[:, None] + oj[None, :], ii[:, None] + oi[None, :]]  # (cells, 4, 2, 2)
    ncell = len(jj)
    Ke = np.zeros((ncell, 4, 4))
    De = np.zeros((ncell, 4, 4))
    Ge = np.zeros((ncell, 4, 4))
    wq = 0.25 * ds * dw
    for xi in GAUSS:
        for eta in GAUSS:
            Nq, dxi, deta = _shape(xi, eta)
            grad = np.stack([dxi / ds, deta / dw], axis=1)  # (4, 2)
            Aq = np.einsum("k,ckij->cij", Nq, Acell)
            # K[a, b] = grad_a . A grad_b
            Ke += wq * np.einsum("ai,cij,bj->cab", grad, Aq, grad)
            # D[a, b] = int N_b dN_a/ds ; G[a, b] = int N_a dN_b/ds
            De += wq * np.outer(grad[:, 0], Nq)[None]
            Ge += wq * np.outer(Nq, grad[:, 0])[None]
    rows = np.repeat(nodes, 4, axis=1).ravel()
    cols = np.tile(nodes, (1, 4)).ravel()
    K = sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(N, N))
    D = sp.csr_matrix((De.ravel(), (rows, cols)), shape=(N, N))
    G = sp.csr_matrix((Ge.ravel(), (rows, cols)), shape=(N, N))
    return K, D, G


def top_face_mass(nw: int, ns: int, dw: float, faces: np.ndarray) -> sp.csr_matrix:
    """Consistent 1D mass of the faces ``s = 1`` selected by ``faces`` (length ``nw - 1``)."""
    N = nw * ns
    rows, cols, vals = [], [], []
    loc = dw / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    for j in np.flatnonzero(faces):
        idx = [j * ns + ns - 1, (j + 1) * ns + ns - 1]
        for a in range(2):
            for b in range(2):
                rows.append(idx[a])
                cols.append(idx[b])
                vals.append(loc[a, b])
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


# ----------------------------------------------------------------------------
# Discrete system
# ----------------------------------------------------------------------------

@dataclass
class DiscreteSystem:
    """Assembled operators; nodal vectors use the index ``j * N_s + i``."""

    shape: tuple
    K: sp.csr_matrix
    D: sp.csr_matrix
    G: sp.csr_matrix
    Mb: sp.csr_matrix
    W: np.ndarray
    h: np.ndarray
    phi: np.ndarray
    Xb: np.ndarray
    dirichlet: np.ndarray
    interior: np.ndarray
    exit_on_gamma3: np.ndarray
    exit_label: list
    beta: Callable
    dbeta: Callable
    spacing: float

    @property
    def n(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def free(self) -> np.ndarray:
        return ~self.dirichlet

    @property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.W > 0)

    def chi_constant(self) -> np.ndarray:
        """Per column ``W * beta(X_exit, phi(X_exit))``; NaN where the exit is not on gamma3."""
        nw, ns = self.shape
        top = np.arange(nw) * ns + ns - 1
        C = np.full(nw, np.nan)
        m = self.exit_on_gamma3
        if np.any(m):
            C[m] = self.W[top[m]] * self.beta(top[m], self.phi[top[m]])
        return C

    def secant(self, u_prev: np.ndarray) -> np.ndarray:
        """Lagged coefficient ``beta(x, z) / z`` at ``z = phi - u_prev`` on boundary nodes."""
        k = np.zeros(self.n)
        idx = self.boundary_nodes
        if len(idx) == 0:
            return k
        z = self.phi[idx] - u_prev[idx]
        small = np.abs(z) <= 1e-12 * np.maximum(1.0, np.abs(self.phi[idx]))
        val = np.empty(len(idx))
        if np.any(~small):
            val[~small] = self.beta(idx[~small], z[~small]) / z[~small]
        if np.any(small):
            val[small] = self.dbeta(idx[small], np.zeros(int(small.sum())))
        k[idx] = np.maximum(val, 0.0)
        return k

    def linear_system(self, chi: np.ndarray, k: np.ndarray):
        """``(A, b)`` of the obstacle problem for fixed ``chi`` and secant ``k``."""
        Wk = self.W * k
        A = (self.K + self.Mb @ sp.diags(Wk)).tocsr()
        b = self.Mb @ (Wk * self.phi) - self.D @ (chi * self.h)
        A, b = _impose_dirichlet(A, b, self.dirichlet)
        return A, b

    def weak_residual(self, u: np.ndarray, chi: np.ndarray) -> np.ndarray:
        """Residual of the weak identity with the exact boundary law."""
        flux = np.zeros(self.n)
        idx = self.boundary_nodes
        if len(idx):
            flux[idx] = self.W[idx] * self.beta(idx, self.phi[idx] - u[idx])
        return self.K @ u + self.D @ (chi * self.h) - self.Mb @ flux


def _impose_dirichlet(A: sp.csr_matrix, b: np.ndarray, mask: np.ndarray):
    if not np.any(mask):
        return A, b
    keep = sp.diags((~mask).astype(float))
    A = (keep @ A + sp.diags(mask.astype(float))).tocsr()
    b = np.where(mask, 0.0, b)
    return A, b


def assemble(grid: CurvilinearGrid, co: TransformedCoefficients, pd: ProblemData | None = None) -> DiscreteSystem:
    pd = grid.pd if pd is None else pd
    nw, ns = grid.shape
    sym = 0.5 * (co.a_hat + np.swapaxes(co.a_hat, -1, -2))
    if np.min(np.linalg.eigvalsh(sym)[..., 0]) <= 0:
        raise SolverError("non-elliptic node encountered during assembly")
    ds = 1.0 / (ns - 1)
    dw = (grid.w[-1] - grid.w[0]) / (nw - 1)
    K, D, G = q1_operators(co.a_hat, ds, dw)
    Mb = top_face_mass(nw, ns, dw, grid.gamma3_faces())
    N = nw * ns
    W = np.zeros(N)
    top = np.arange(nw) * ns + ns - 1
    W[top[grid.exit_on_gamma3]] = co.boundary_weight[grid.exit_on_gamma3]
    Xb = grid.X.reshape(N, 2)
    phi = np.zeros(N)
    phi[top] = pd.phi_at(Xb[top, 0], Xb[top, 1])

    def beta(idx, z):
        return pd.beta_at(Xb[idx, 0], Xb[idx, 1], z)

    def dbeta(idx, z):
        try:
            return pd.dbeta_dz(Xb[idx, 0], Xb[idx, 1], z)
        except ExprError:
            eps = 1e-7
            return (pd.beta_at(Xb[idx, 0], Xb[idx, 1], z + eps) - pd.beta_at(Xb[idx, 0], Xb[idx, 1], z)) / eps

    tags = grid.tags.reshape(N)
    return DiscreteSystem((nw, ns), K, D, G, Mb, W, co.h.reshape(N).copy(), phi, Xb,
                          tags == DIRICHLET, tags == INTERIOR, grid.exit_on_gamma3.copy(),
                          list(grid.exit_label), beta, dbeta, grid.spacing)


# ----------------------------------------------------------------------------
# Linear complementarity
# ----------------------------------------------------------------------------

@njit(cache=True)
def _psor(indptr, indices, data, b, u, free, omega, tol, max_sweeps):
    n = b.shape[0]
    diag = np.zeros(n)
    for r in range(n):
        for k in range(indptr[r], indptr[r + 1]):
            if indices[k] == r:
                diag[r] = data[k]
    sweeps = 0
    res = 0.0
    while True:
        res = 0.0
        for r in range(n):
            if not free[r]:
                continue
            acc = -b[r]
            for k in range(indptr[r], indptr[r + 1]):
                acc += data[k] * u[indices[k]]
            m = abs(min(u[r], acc))
            if m > res:
                res = m
        if res <= tol or sweeps >= max_sweeps:
            break
        for r in range(n):
            if not free[r]:
                continue
            acc = b[r]
            for k in range(indptr[r], indptr[r + 1]):
                c = indices[k]
                if c != r:
                    acc -= data[k] * u[c]
            v = u[r] + omega * (acc / diag[r] - u[r])
            u[r] = v if v > 0.0 else 0.0
        sweeps += 1
    return sweeps, res


def complementarity_residual(A: sp.csr_matrix, b: np.ndarray, u: np.ndarray, free: np.ndarray) -> float:
    r = A @ u - b
    return float(np.max(np.abs(np.minimum(u, r))[free], initial=0.0))


def _active_set_start(A: sp.csr_matrix, b: np.ndarray, u0: np.ndarray, free: np.ndarray, max_iter: int = 40):
    """Primal-dual active-set iterate used as the starting point of projected SOR."""
    u = np.maximum(u0, 0.0)
    u[~free] = 0.0
    c = float(np.mean(A.diagonal()[free])) if np.any(free) else 1.0
    lam = A @ u - b
    prev = None
    for _ in range(max_iter):
        act = free & ((lam - c * u) > 0)
        ina = np.flatnonzero(free & ~act)
        if prev is not None and np.array_equal(act, prev):
            break
        prev = act
        u = np.zeros_like(u)
        if len(ina):
            Aii = A[ina][:, ina].tocsc()
            u[ina] = spsolve(Aii, b[ina])
        lam = A @ u - b
        lam[ina] = 0.0
    return np.maximum(u, 0.0)


@dataclass
class LCPResult:
    u: np.ndarray
    sweeps: int
    residual: float
    scale: float
    converged: bool


def solve_lcp(A: sp.csr_matrix, b: np.ndarray, free: np.ndarray, u_prev: np.ndarray | None = None,
              omega: float = 1.5, tol: float = 1e-10, cap_factor: int = 20, warm_start: bool = True) -> LCPResult:
    """``u >= 0``, ``A u - b >= 0``, ``u (A u - b) = 0`` on free nodes; ``u = 0`` elsewhere.

    Projected SOR with relaxation ``omega``; the iterate starts from a
    primal-dual active-set solution when ``warm_start`` is set.
    """
    n = len(b)
    u = np.zeros(n) if u_prev is None else np.array(u_prev, dtype=float)
    if warm_start:
        u = _active_set_start(A, b, u, free)
    u[~free] = 0.0
    A = A.tocsr()
    A.sort_indices()
    dmax = float(np.max(np.abs(A.diagonal()[free]), initial=0.0))
    scale = max(float(np.max(np.abs(b[free]), initial=0.0)), dmax * float(np.max(np.abs(u), initial=0.0)), 1e-300)
    cap = cap_factor * int(np.count_nonzero(free))
    sweeps, res = _psor(A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data.astype(np.float64),
                        b.astype(np.float64), u, free.astype(np.bool_), float(omega), tol * scale, cap)
    return LCPResult(u, int(sweeps), float(res), scale, bool(res <= tol * scale))


# ----------------------------------------------------------------------------
# Reconstruction of chi
# ----------------------------------------------------------------------------

@dataclass
class ChiReconstruction:
    chi: np.ndarray
    top_wet: np.ndarray      # per column: index of the highest node with chi = 1, -1 when none
    clamped: np.ndarray      # nodal mask of clamp events
    mixed: np.ndarray        # per column: neighbouring exits disagree
    threshold: float


def support_top(sys: DiscreteSystem, u: np.ndarray, threshold: float) -> np.ndarray:
    """Per column, the highest free node with ``u > threshold`` (``-1`` when none)."""
    nw, ns = sys.shape
    wet = (u.reshape(nw, ns) > threshold) & ~sys.dirichlet.reshape(nw, ns)
    idx = np.arange(ns)[None, :]
    return np.max(np.where(wet, idx, -1), axis=1)


def dry_law(sys: DiscreteSystem):
    """Nodal dry-region values clamped to ``[0, 1]`` and the mask of clamped nodes.

    Columns leaving through gamma3 get ``C / h`` with ``C = W beta(X_exit, phi)``;
    the others get ``0``.
    """
    nw, ns = sys.shape
    h = sys.h.reshape(nw, ns)
    C = sys.chi_constant()
    raw = np.zeros((nw, ns))
    on3 = sys.exit_on_gamma3
    raw[on3] = C[on3, None] / h[on3]
    return np.clip(raw, 0.0, 1.0), (raw > 1.0) | (raw < 0.0)


def chi_from_top(sys: DiscreteSystem, top: np.ndarray):
    """``chi = 1`` up to ``top`` per column and the dry-region law above it.

    Returns ``(chi, clamped)``; clamp events are only counted above the wet
    extent.
    """
    nw, ns = sys.shape
    law, clamp = dry_law(sys)
    rows = np.arange(ns)[None, :]
    wet = rows <= np.asarray(top)[:, None]
    chi = np.where(wet, 1.0, law)
    return chi.reshape(-1), (clamp & ~wet).reshape(-1)


def _mixed_flags(sys: DiscreteSystem, top: np.ndarray) -> np.ndarray:
    nw, ns = sys.shape
    labels = np.array([lab == "gamma3" for lab in sys.exit_label])
    mixed = np.zeros(nw, dtype=bool)
    mixed[1:] |= labels[1:] != labels[:-1]
    mixed[:-1] |= labels[1:] != labels[:-1]
    return mixed & (np.asarray(top) < ns - 1)


def reconstruct_chi(sys: DiscreteSystem, u: np.ndarray, threshold: float,
                    top: np.ndarray | None = None) -> ChiReconstruction:
    """Saturation from the support of ``u`` and the dry-region law.

    ``top`` optionally raises the per-column extent of ``chi = 1`` above the
    support of ``u`` (nodes there carry ``u = 0``, so complementarity holds).
    """
    k = support_top(sys, u, threshold)
    if top is not None:
        k = np.maximum(k, top)
    chi, clamped = chi_from_top(sys, k)
    return ChiReconstruction(chi, k, clamped, _mixed_flags(sys, k), threshold)


# ----------------------------------------------------------------------------
# Outer iteration
# ----------------------------------------------------------------------------

OUTER_METHODS = ("search", "damped")


@dataclass
class SolverParams:
    omega: float = 0.5
    sor_omega: float = 1.5
    lcp_tol: float = 1e-10
    cap_factor: int = 20
    tol_chi: float = 1e-8
    tol_u: float = 1e-8
    max_outer: int = 200
    support_floor: float = 1e-12
    warm_start: bool = True
    method: str = "search"

    def __post_init__(self):
        if not 0.0 < self.omega <= 1.0:
            raise ValueError("omega must lie in (0, 1]")
        if not 0.0 < self.sor_omega < 2.0:
            raise ValueError("sor_omega must lie in (0, 2)")
        if self.method not in OUTER_METHODS:
            raise ValueError(f"method must be one of {OUTER_METHODS}")


@dataclass
class SolutionPair:
    u: np.ndarray
    chi: np.ndarray
    shape: tuple
    trace: list = field(default_factory=list)
    converged: bool = False
    lcp_flagged: bool = False
    top_wet: np.ndarray | None = None
    clamped: np.ndarray | None = None
    clamp_events: int = 0
    mixed: np.ndarray | None = None
    initialization: str = "chi=1"
    extent_eps: float | None = None

    @property
    def U(self) -> np.ndarray:
        return self.u.reshape(self.shape)

    @property
    def CHI(self) -> np.ndarray:
        return self.chi.reshape(self.shape)

    @property
    def complementarity_defect(self) -> float:
        return float(np.max(np.abs(self.u * (1.0 - self.chi)), initial=0.0))


def support_threshold(u: np.ndarray, floor: float) -> float:
    return floor * float(np.max(np.abs(u), initial=0.0))


class _Stepper:
    """One LCP solve per call, with the boundary law lagged at the last iterate."""

    def __init__(self, sys: DiscreteSystem, p: SolverParams):
        self.sys, self.p = sys, p
        self.flagged = False
        self.trace: list = []
        self.clamp_events = 0
        self.last = None

    def __call__(self, chi: np.ndarray, u_prev: np.ndarray, top: np.ndarray | None = None) -> np.ndarray:
        """LCP solve; with ``top`` given, nodes above the extent are held at zero."""
        p, sys = self.p, self.sys
        A, b = sys.linear_system(chi, sys.secant(u_prev))
        free = sys.free
        if top is not None:
            free = free & _below(sys, top)
        res = solve_lcp(A, b, free, u_prev, p.sor_omega, p.lcp_tol, p.cap_factor, p.warm_start)
        self.flagged |= not res.converged
        self.last = res
        return res.u

    def record(self, phase, chi_old, chi_new, u_old, u_new, top, clamped, sweeps=None, residual=None):
        res = self.last
        self.clamp_events += int(clamped.sum())
        self.trace.append({"iteration": len(self.trace) + 1, "phase": phase,
                           "delta_chi": float(np.max(np.abs(chi_new - chi_old))),
                           "delta_u": float(np.max(np.abs(u_new - u_old))),
                           "u_max": float(np.max(np.abs(u_new), initial=0.0)),
                           "sweeps": res.sweeps if sweeps is None else sweeps,
                           "lcp_residual": res.residual if residual is None else residual,
                           "wet_columns": int(np.count_nonzero(top >= 0)),
                           "clamps": int(clamped.sum())})


def _below(sys: DiscreteSystem, top: np.ndarray) -> np.ndarray:
    """Nodal mask of rows at or below the per-column extent."""
    nw, ns = sys.shape
    return (np.arange(ns)[None, :] <= np.asarray(top)[:, None]).reshape(-1)


def _regularized_residual(sys: DiscreteSystem, law: np.ndarray, u: np.ndarray, eps: float):
    """Residual and Jacobian with the saturation ramp ``chi_eps(u)``.

    ``chi_eps`` rises from ``0`` at ``u = -eps`` through ``law`` at ``u = 0``
    to ``1`` at ``u = eps``; the lower branch penalizes negative ``u``.
    """
    free = sys.free
    up = np.clip(u / eps, 0.0, 1.0)
    down = np.clip(1.0 + u / eps, 0.0, 1.0)
    chi = np.where(u >= 0.0, law + (1.0 - law) * up, law * down)
    dchi = np.where((u > 0.0) & (u < eps), (1.0 - law) / eps, 0.0)
    dchi += np.where((u < 0.0) & (u > -eps), law / eps, 0.0)
    idx = sys.boundary_nodes
    flux = np.zeros(sys.n)
    dflux = np.zeros(sys.n)
    flux[idx] = sys.W[idx] * sys.beta(idx, sys.phi[idx] - u[idx])
    dflux[idx] = -sys.W[idx] * sys.dbeta(idx, sys.phi[idx] - u[idx])
    r = sys.K @ u + sys.D @ (chi * sys.h) - sys.Mb @ flux
    J = sys.K + sys.D @ sp.diags(sys.h * dchi) - sys.Mb @ sp.diags(dflux)
    r[~free] = u[~free]
    J = (sp.diags(free.astype(float)) @ J + sp.diags((~free).astype(float))).tocsc()
    return r, J


def _newton(sys: DiscreteSystem, law: np.ndarray, u: np.ndarray, eps: float, tol: float, max_iter: int):
    r, J = _regularized_residual(sys, law, u, eps)
    norm = float(np.max(np.abs(r)))
    for _ in range(max_iter):
        if norm <= tol:
            break
        du = spsolve(J, -r)
        lam = 1.0
        while True:
            v = u + lam * du
            r2, J2 = _regularized_residual(sys, law, v, eps)
            n2 = float(np.max(np.abs(r2)))
            if n2 < (1.0 - 1e-4 * lam) * norm or lam < 1e-6:
                break
            lam *= 0.5
        u, r, J, norm = v, r2, J2, n2
    return u, norm


@dataclass
class ExtentResult:
    top: np.ndarray
    u: np.ndarray
    eps: float
    residual: float
    converged: bool
    clamped: int = 0         # free nodes at or below eps whose law was clamped to 1


def regularized_extent(sys: DiscreteSystem, u0: np.ndarray, rel_eps: float = 1e-6,
                       tol: float = 1e-12, max_iter: int = 60) -> ExtentResult:
    """Per-column wet extent from the regularized equality problem.

    The saturation is replaced by the monotone ramp
    ``chi = law + (1 - law) clip(u / eps)`` and the equations are solved on
    every free node by a damped semismooth Newton method, with no sign
    constraint on ``u``.  The ramp is continuous in ``u``, so the interface
    moves by fractions of a cell as the data vary, which integer extents
    cannot do.  ``eps`` is lowered from ``0.1 max|u0|`` to
    ``rel_eps max|u0|`` by factors of ten, each stage warm-started from the
    previous one.  When a stage fails (the regularized problem may lose its
    solution where the interface cannot stay continuous) the last converged
    stage is kept.  The wet extent of a column is its highest node with
    ``u > eps``.
    """
    nw, ns = sys.shape
    law = dry_law(sys)[0].reshape(-1)
    u = np.array(u0, dtype=float)
    umax = max(float(np.max(np.abs(u), initial=0.0)), 1e-300)
    stages = int(round(-np.log10(rel_eps)))
    best = None
    for e in range(1, stages + 1):
        eps = umax * 10.0 ** (-e) if e < stages else umax * rel_eps
        v, norm = _newton(sys, law, u, eps, tol, max_iter)
        if norm > tol:
            break
        u, best = v, (eps, norm)
    if best is None:
        return ExtentResult(np.full(nw, -1), u, float("nan"), norm, False)
    eps, norm = best
    U = u.reshape(nw, ns)
    rows = np.arange(ns)[None, :]
    top = np.max(np.where(U > eps, rows, -1), axis=1)
    clamped = int(np.count_nonzero(dry_law(sys)[1].reshape(-1) & (u <= eps) & sys.free))
    return ExtentResult(top, u, eps, norm, True, clamped)


def outer_fixed_point(sys: DiscreteSystem, params: SolverParams | None = None,
                      chi0: np.ndarray | None = None, u0: np.ndarray | None = None) -> SolutionPair:
    """Joint solution ``(u, chi)`` of the discrete problem.

    Both methods start from ``chi = 1``.  ``search`` fixes the wet extent
    of every column from the regularized problem, holds ``u = 0`` above it
    and runs the damped iteration to relax the lagged boundary law; the
    equations on dry rows next to the interface are then met only up to
    the discretization error.  ``damped`` runs ``chi <- (1 - omega) chi + omega reconstruct(u)``
    with the support of ``u`` as the wet region from the start.
    """
    p = params or SolverParams()
    n = sys.n
    chi = np.ones(n) if chi0 is None else np.array(chi0, dtype=float)
    u = np.zeros(n) if u0 is None else np.array(u0, dtype=float)
    step = _Stepper(sys, p)
    u_new = step(chi, u)
    rec = reconstruct_chi(sys, u_new, support_threshold(u_new, p.support_floor))
    step.record("initial", chi, rec.chi, u, u_new, rec.top_wet, rec.clamped)
    u = u_new
    top = None
    initialization = "damped"
    ext = regularized_extent(sys, u) if p.method == "search" else None
    if ext is not None and ext.converged:
        top = ext.top
        initialization = "regularized"
        step.clamp_events += ext.clamped
        chi, _ = chi_from_top(sys, top)
    else:
        chi = (1.0 - p.omega) * chi + p.omega * rec.chi
    converged = False
    for _ in range(p.max_outer):
        u_new = step(chi, u, top)
        rec = reconstruct_chi(sys, u_new, support_threshold(u_new, p.support_floor), top)
        chi_new = (1.0 - p.omega) * chi + p.omega * rec.chi
        step.record("damped", chi, chi_new, u, u_new, rec.top_wet, rec.clamped)
        dchi = float(np.max(np.abs(chi_new - chi)))
        du = float(np.max(np.abs(u_new - u)))
        unorm = float(np.max(np.abs(u_new), initial=0.0))
        chi, u = chi_new, u_new
        if dchi <= p.tol_chi and du <= p.tol_u * max(unorm, 1e-300):
            converged = True
            break
    rec = reconstruct_chi(sys, u, support_threshold(u, p.support_floor), top)
    step.clamp_events += int(rec.clamped.sum())
    return SolutionPair(u, rec.chi, sys.shape, step.trace, converged, step.flagged, rec.top_wet,
                        rec.clamped, step.clamp_events, rec.mixed, initialization,
                        ext.eps / max(float(np.max(np.abs(ext.u))), 1e-300) if top is not None else None)


# ----------------------------------------------------------------------------
# Residual audit
# ----------------------------------------------------------------------------

def interface_band(pair: SolutionPair, cells: int = 3) -> np.ndarray:
    """Nodal mask within ``cells`` cells (in both directions) of a wet/dry transition.

    Transitions between neighbouring columns count as well, so steep parts
    of the free boundary are covered along their whole height.
    """
    nw, ns = pair.shape
    wet = np.arange(ns)[None, :] <= np.asarray(pair.top_wet)[:, None]
    edge = np.zeros((nw, ns), dtype=bool)
    diff_s = wet[:, 1:] != wet[:, :-1]
    edge[:, 1:] |= diff_s
    edge[:, :-1] |= diff_s
    diff_w = wet[1:] != wet[:-1]
    edge[1:] |= diff_w
    edge[:-1] |= diff_w
    band = edge.copy()
    for d in range(1, cells + 1):
        band[d:] |= edge[:-d]
        band[:-d] |= edge[d:]
    grown = band.copy()
    for d in range(1, cells + 1):
        grown[:, d:] |= band[:, :-d]
        grown[:, :-d] |= band[:, d:]
    return grown.reshape(-1)


def residuals(pair: SolutionPair, sys: DiscreteSystem, band_cells: int = 3) -> dict:
    """Weak residual of the state equation and the sign check of ``div(chi H) - chi_{u>0} div H``."""
    R = sys.weak_residual(pair.u, pair.chi)
    load = sys.D @ (pair.chi * sys.h)
    scale = max(float(np.max(np.abs(load), initial=0.0)),
                float(np.max(np.abs(sys.K @ pair.u), initial=0.0)), 1e-300)
    band = interface_band(pair, band_cells)
    inner = sys.interior & ~band
    res_i = float(np.max(np.abs(R[inner]), initial=0.0)) / scale
    res_band = float(np.max(np.abs(R[sys.interior & band]), initial=0.0)) / scale
    wet = np.zeros(sys.n)
    nw, ns = sys.shape
    for j, k in enumerate(pair.top_wet):
        if k >= 0:
            wet[j * ns:j * ns + k + 1] = 1.0
    # S_i = -int q dN_i/ds - wet_i int dh/ds N_i  (must be <= 0 on nonnegative hats)
    S = -(sys.D @ (pair.chi * sys.h)) - wet * (sys.G @ sys.h)
    sign_min = float(np.min(-S[sys.interior] / scale, initial=0.0))
    free = sys.free
    # on Dirichlet nodes the identity relaxes to an inequality: the residual must be <= 0
    gamma2_side = float(np.max(R[~free])) / scale if np.any(~free) else 0.0
    return {"scale": scale, "weak_residual_interior": res_i, "weak_residual_band": res_band,
            "sign_check_min": sign_min, "gamma2_inequality_residual": gamma2_side,
            "band_cells": band_cells, "complementarity_defect": pair.complementarity_defect}
