"""Scikit-learn style wrappers around the chart and the solver.

Both estimators take the problem as plain ``geometry`` and ``fields``
dictionaries, in the same form as the configuration file, so that
``get_params``/``set_params``/``clone`` work without special cases.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import criterion_table, extract_profile
from .flow import FlowChart as _Chart
from .flow import IntegratorOptions
from .geometry import Domain
from .problem import ProblemData
from .solver import SolverParams, assemble, outer_fixed_point, residuals
from .transform import build_grid, coefficients


def _problem(geometry: dict, fields: dict) -> ProblemData:
    return ProblemData.from_dict(Domain.from_dict(geometry), fields)


def _as_pairs(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValueError(f"expected an array of shape (n, 2), got {X.shape}")
    return X


class FlowChart(BaseEstimator, TransformerMixin):
    """Map chart coordinates ``(t, w)`` to physical points and back.

    ``fit`` builds the orbit fan through ``x2 = h``; ``transform`` takes rows
    ``(t, w)`` and returns rows ``(x1, x2)``; ``inverse_transform`` undoes it.
    """

    def __init__(self, geometry=None, fields=None, h=0.0, w_range=None, method="RK45",
                 rtol=1e-10, atol=1e-12):
        self.geometry = geometry
        self.fields = fields
        self.h = h
        self.w_range = w_range
        self.method = method
        self.rtol = rtol
        self.atol = atol

    def fit(self, X=None, y=None):
        pd = _problem(self.geometry, self.fields)
        opts = IntegratorOptions(method=self.method, rtol=self.rtol, atol=self.atol)
        self.chart_ = _Chart(pd, self.h, self.w_range, opts)
        self.w_range_ = self.chart_.w_range
        return self

    def transform(self, X):
        check_is_fitted(self, "chart_")
        TW = _as_pairs(X)
        return np.array([self.chart_(t, w) for t, w in TW]).reshape(-1, 2)

    def inverse_transform(self, X):
        check_is_fitted(self, "chart_")
        P = _as_pairs(X)
        return np.array([self.chart_.inverse(p) for p in P]).reshape(-1, 2)

    def jacobian(self, X):
        """Chart Jacobian ``Y_h`` at rows ``(t, w)``."""
        check_is_fitted(self, "chart_")
        TW = _as_pairs(X)
        return np.array([float(self.chart_.jacobian_closed(w, t)) for t, w in TW])


class FreeBoundarySolver(BaseEstimator):
    """Solve the free-boundary problem on a chart grid and predict the interface.

    After ``fit`` the converged pair, the grid and the extracted profile are
    available as ``pair_``, ``grid_`` and ``profile_``.  ``predict`` takes
    orbit labels ``w`` and returns the interface height ``Phi_h(w)`` in the
    chart variable ``t``, interpolated linearly between columns.
    """

    def __init__(self, geometry=None, fields=None, h=0.0, w_range=None, N_w=65, N_s=65,
                 t_low_mode="alpha_minus", omega=0.5, sor_omega=1.5, lcp_tol=1e-10, cap_factor=20,
                 tol_chi=1e-8, tol_u=1e-8, max_outer=200, support_floor=1e-12, warm_start=True,
                 method="search", rtol=1e-10, atol=1e-12):
        self.geometry = geometry
        self.fields = fields
        self.h = h
        self.w_range = w_range
        self.N_w = N_w
        self.N_s = N_s
        self.t_low_mode = t_low_mode
        self.omega = omega
        self.sor_omega = sor_omega
        self.lcp_tol = lcp_tol
        self.cap_factor = cap_factor
        self.tol_chi = tol_chi
        self.tol_u = tol_u
        self.max_outer = max_outer
        self.support_floor = support_floor
        self.warm_start = warm_start
        self.method = method
        self.rtol = rtol
        self.atol = atol

    def _params(self) -> SolverParams:
        return SolverParams(omega=self.omega, sor_omega=self.sor_omega, lcp_tol=self.lcp_tol,
                            cap_factor=self.cap_factor, tol_chi=self.tol_chi, tol_u=self.tol_u,
                            max_outer=self.max_outer, support_floor=self.support_floor,
                            warm_start=self.warm_start, method=self.method)

    def fit(self, X=None, y=None):
        params = self._params()
        pd = _problem(self.geometry, self.fields)
        opts = IntegratorOptions(rtol=self.rtol, atol=self.atol)
        self.grid_ = build_grid(pd, self.h, self.w_range, N_w=self.N_w, N_s=self.N_s,
                                t_low_mode=self.t_low_mode, options=opts)
        self.system_ = assemble(self.grid_, coefficients(self.grid_))
        self.pair_ = outer_fixed_point(self.system_, params)
        self.residuals_ = residuals(self.pair_, self.system_)
        self.profile_ = extract_profile(self.pair_, self.grid_)
        self.criterion_ = criterion_table(self.profile_, self.grid_)
        self.converged_ = bool(self.pair_.converged and not self.pair_.lcp_flagged)
        return self

    def predict(self, X):
        check_is_fitted(self, "profile_")
        w = np.asarray(X, dtype=float)
        if w.ndim == 2 and w.shape[1] == 1:
            w = w[:, 0]
        if w.ndim != 1:
            raise ValueError("predict expects orbit labels w as shape (n,) or (n, 1)")
        lo, hi = self.profile_.w[0], self.profile_.w[-1]
        if np.any((w < lo - 1e-12) | (w > hi + 1e-12)):
            raise ValueError(f"orbit labels must lie in [{lo}, {hi}]")
        return np.interp(w, self.profile_.w, self.profile_.phi)

    def state(self):
        """Nodal ``u`` and ``chi`` as ``(N_w, N_s)`` arrays."""
        check_is_fitted(self, "pair_")
        return self.pair_.U.copy(), self.pair_.CHI.copy()
