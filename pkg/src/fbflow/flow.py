"""Orbits of the drift field, the flow chart and its Jacobian.

An orbit starts at ``(w, h)`` and solves ``X' = H(X)`` forward and backward
until it leaves the domain.  Along with the position we integrate the
variational equation ``(dX/dw)' = DH(X) dX/dw`` and the running integral of
``div H``.  The augmented state is therefore ``[x1, x2, dX1/dw, dX2/dw, I]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from .geometry import OUTSIDE, OVER_X1
from .problem import ProblemData


class FlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class IntegratorOptions:
    """Settings of the adaptive Runge-Kutta integration."""

    method: str = "RK45"
    rtol: float = 1e-10
    atol: float = 1e-12
    max_chunks: int = 64
    collar: float = 1e-3     # relative to the domain diameter
    event_offset: float = 1e-9  # relative to the domain diameter


TIGHT = IntegratorOptions(method="DOP853", rtol=1e-13, atol=1e-14)


@dataclass(frozen=True)
class Exit:
    """Point where an orbit meets the boundary."""

    time: float
    point: np.ndarray
    arc: int
    s: float
    label: str
    normal: np.ndarray
    H_nu: float
    tangential: bool = False


@dataclass
class Orbit:
    w: float
    h: float
    alpha_minus: float
    alpha_plus: float
    exit_minus: Exit
    exit_plus: Exit
    _segments: list = field(default_factory=list, repr=False)
    _times: np.ndarray = field(default=None, repr=False)
    H2_start: float = float("nan")

    @property
    def start(self) -> np.ndarray:
        return np.array([self.w, self.h])

    @property
    def step_times(self) -> np.ndarray:
        """Accepted integrator steps inside ``[alpha_minus, alpha_plus]``."""
        t = self._times
        t = t[(t > self.alpha_minus) & (t < self.alpha_plus)]
        return np.concatenate([[self.alpha_minus], t, [self.alpha_plus]])

    def state(self, t) -> np.ndarray:
        """Augmented state at times ``t`` (shape ``t.shape + (5,)``)."""
        t = np.asarray(t, dtype=float)
        flat = np.clip(t.ravel(), self._segments[0][0], self._segments[-1][1])
        out = np.empty((flat.size, 5))
        done = np.zeros(flat.size, dtype=bool)
        for lo, hi, sol in self._segments:
            m = (~done) & (flat >= lo) & (flat <= hi)
            if np.any(m):
                out[m] = sol(flat[m]).T
                done |= m
        return out.reshape(t.shape + (5,))

    def X(self, t) -> np.ndarray:
        return self.state(t)[..., :2]

    def Xw(self, t) -> np.ndarray:
        return self.state(t)[..., 2:4]

    def div_integral(self, t):
        return self.state(t)[..., 4]


def _merge_segments(bwd: list, fwd: list) -> list:
    """Order the dense-output pieces by increasing time."""
    segs = [(min(a, b), max(a, b), s) for a, b, s in bwd] + [(min(a, b), max(a, b), s) for a, b, s in fwd]
    segs.sort(key=lambda x: x[0])
    return segs


class FlowIntegrator:
    """Integrates orbits of ``H`` inside ``pd.domain``."""

    def __init__(self, pd: ProblemData, options: IntegratorOptions | None = None):
        self.pd = pd
        self.options = options or IntegratorOptions()
        dom = pd.domain
        self.diameter = dom.diameter
        self.collar = self.options.collar * dom.diameter
        self.delta = self.options.event_offset * dom.diameter
        x0, x1, y0, y1 = dom.bbox
        c = self.collar
        self._box = (x0 - c, x1 + c, y0 - c, y1 + c)

    # -- right-hand side -------------------------------------------------------
    def _clamp(self, x1: float, x2: float):
        b = self._box
        if b[0] <= x1 <= b[1] and b[2] <= x2 <= b[3]:
            return x1, x2
        # constant extrapolation along the boundary normal beyond the collar
        p = np.array([x1, x2])
        proj = self.pd.domain.project(p)
        d = p - proj.point
        n = float(np.linalg.norm(d))
        q = proj.point + self.collar * d / n
        return float(q[0]), float(q[1])

    def rhs(self, t, y):
        x1, x2 = self._clamp(y[0], y[1])
        H1, H2, a, b, c, d = self.pd.field_and_jacobian(x1, x2)
        return np.array([H1, H2, a * y[2] + b * y[3], c * y[2] + d * y[3], a + d])

    def _event(self):
        dom, delta = self.pd.domain, self.delta

        def g(t, y):
            return dom.signed_distance(y[:2]) + delta

        g.terminal = True
        g.direction = -1
        return g

    # -- orbits ------------------------------------------------------------------
    def _run(self, y0: np.ndarray, direction: int):
        """Integrate until the exit event; returns (segments, step times, t_event)."""
        o = self.options
        H1, H2 = self.pd.H(float(y0[0]), float(y0[1]))
        speed = max(math.hypot(H1, H2), 1e-12)
        span = 2.0 * self.diameter / speed
        ev = self._event()
        t0, y = 0.0, np.asarray(y0, dtype=float)
        segs, times = [], []
        for _ in range(o.max_chunks):
            sol = solve_ivp(self.rhs, (t0, t0 + direction * span), y, method=o.method,
                            rtol=o.rtol, atol=o.atol, dense_output=True, events=ev)
            if sol.status == -1:
                raise FlowError(f"integration failed at t={sol.t[-1]:.6g} near "
                                f"x={sol.y[:2, -1].tolist()} (near-tangential exit?): {sol.message}")
            segs.append((t0, float(sol.t[-1]), sol.sol))
            times.append(sol.t)
            if sol.status == 1:
                return segs, np.concatenate(times), float(sol.t_events[0][0])
            t0, y = float(sol.t[-1]), sol.y[:, -1]
        raise FlowError(f"orbit from {list(map(float, y0[:2]))} does not leave the domain")

    def _locate_exit(self, segs, times, t_ev: float, direction: int) -> Exit:
        dom, delta = self.pd.domain, self.delta
        orb = Orbit(0.0, 0.0, 0.0, 0.0, None, None, _merge_segments([], segs) if direction > 0
                    else _merge_segments(segs, []))

        def f(t):
            return dom.signed_distance(orb.X(t)) + 0.5 * delta

        a = None
        for ta in times[::-1]:
            if (ta - t_ev) * direction < 0 and f(ta) > 0:
                a = float(ta)
                break
        if a is None:
            t_r = 0.0
        else:
            t_r = brentq(f, min(a, t_ev), max(a, t_ev), xtol=1e-16, rtol=4 * np.finfo(float).eps)
        p = orb.X(t_r)
        arcs = dom.arcs_near(p, tol=0.5 * delta + 1e-8 * self.diameter)
        if not arcs:
            pr = dom.project(p)
            arcs = [(pr.arc, pr.s)]
        H = np.asarray(self.pd.H(float(p[0]), float(p[1])))
        scored = [(float(np.dot(H, dom.normal(i, s))), i, s) for i, s in arcs]
        Hnu, i, s = max(scored) if direction > 0 else min(scored)
        Hn = float(np.linalg.norm(H))
        tangential = abs(Hnu) <= 1e-6 * max(Hn, 1e-300)
        t_exit = t_r
        if a is None:
            t_exit = 0.0
        elif not tangential:
            # one Newton step onto the supporting arc
            t_exit = t_r - self._gap(p, i) / Hnu
        p = orb.X(t_exit)
        _, s = dom._exact_arc_projection(i, p)
        nu = dom.normal(i, s)
        return Exit(float(t_exit), p, int(i), float(s), dom.arcs[i].label, nu, Hnu, tangential)

    def _gap(self, p: np.ndarray, arc: int) -> float:
        """Signed distance of ``p`` to the supporting arc, positive outside."""
        dom = self.pd.domain
        d, s = dom._exact_arc_projection(arc, p)
        c = dom.arcs[arc].point(s)
        nu = dom.normal(arc, s)
        return float(np.dot(p - c, nu))

    def orbit(self, w: float, h: float) -> Orbit:
        p = np.array([w, h], dtype=float)
        if self.pd.domain.contains(p, tol=1e-9 * self.diameter) == OUTSIDE:
            raise FlowError(f"start point ({w}, {h}) lies outside the domain")
        y0 = np.array([w, h, 1.0, 0.0, 0.0])
        fseg, ftimes, fev = self._run(y0, +1)
        bseg, btimes, bev = self._run(y0, -1)
        ex_p = self._locate_exit(fseg, ftimes, fev, +1)
        ex_m = self._locate_exit(bseg, btimes, bev, -1)
        segs = _merge_segments(bseg, fseg)
        times = np.unique(np.concatenate([btimes, ftimes]))
        return Orbit(float(w), float(h), ex_m.time, ex_p.time, ex_m, ex_p, segs, times,
                     H2_start=float(self.pd.H(float(w), float(h))[1]))

    def flow_to(self, w: float, h: float, t: float) -> np.ndarray:
        """Augmented state at time ``t`` from ``(w, h)`` without exit detection."""
        y0 = np.array([w, h, 1.0, 0.0, 0.0])
        if t == 0.0:
            return y0
        o = self.options
        sol = solve_ivp(self.rhs, (0.0, float(t)), y0, method=o.method, rtol=o.rtol, atol=o.atol)
        if sol.status != 0:
            raise FlowError(f"integration to t={t} failed: {sol.message}")
        return sol.y[:, -1]


# ----------------------------------------------------------------------------
# Chart
# ----------------------------------------------------------------------------

class FlowChart:
    """The chart ``(t, w) -> X(t, w, h)`` on the fan of orbits through ``x2 = h``."""

    def __init__(self, pd: ProblemData, h: float, w_range: Sequence[float] | None = None,
                 options: IntegratorOptions | None = None):
        self.pd = pd
        self.h = float(h)
        chord = pd.domain.chord(self.h)
        self.chord = chord
        self.w_range = tuple(map(float, w_range)) if w_range is not None else chord
        lo, hi = self.w_range
        tol = 1e-9 * pd.domain.diameter
        if lo >= hi or lo < chord[0] - tol or hi > chord[1] + tol:
            raise FlowError(f"w_range {self.w_range} must lie within the chord {chord} of x2 = {h}")
        self.integrator = FlowIntegrator(pd, options)
        self._orbits: dict[float, Orbit] = {}
        self._table = None

    @property
    def options(self) -> IntegratorOptions:
        return self.integrator.options

    def orbit(self, w: float) -> Orbit:
        w = float(w)
        orb = self._orbits.get(w)
        if orb is None:
            orb = self.integrator.orbit(w, self.h)
            self._orbits[w] = orb
        return orb

    def __call__(self, t, w) -> np.ndarray:
        return self.orbit(w).X(t)

    def alpha_plus(self, w: float) -> float:
        return self.orbit(w).alpha_plus

    def alpha_minus(self, w: float) -> float:
        return self.orbit(w).alpha_minus

    # -- Jacobian ----------------------------------------------------------------
    def jacobian_closed(self, w: float, t) -> np.ndarray:
        orb = self.orbit(w)
        return -orb.H2_start * np.exp(orb.div_integral(t))

    def jacobian_direct(self, w: float, t) -> np.ndarray:
        st = self.orbit(w).state(t)
        H1, H2 = self.pd.H(st[..., 0], st[..., 1])
        return H1 * st[..., 3] - H2 * st[..., 2]

    # -- exit-time derivatives ---------------------------------------------------
    def _gamma3_exit(self, w: float):
        orb = self.orbit(w)
        ex = orb.exit_plus
        if ex.label != "gamma3":
            raise FlowError(f"the orbit from w={w} exits through {ex.label}, not gamma3")
        H = np.asarray(self.pd.H(float(ex.point[0]), float(ex.point[1])))
        Hnu = float(np.dot(H, ex.normal))
        if Hnu <= 1e-12 * max(1.0, float(np.linalg.norm(H))):
            raise FlowError(f"grazing exit at w={w}: H.nu = {Hnu:.3e}")
        return orb, ex, H, Hnu

    def alpha_plus_prime(self, w: float) -> float:
        """Derivative of the exit time by implicit differentiation of the boundary graph."""
        orb, ex, H, _ = self._gamma3_exit(w)
        Xw = orb.Xw(ex.time)
        nu = ex.normal
        if self.pd.domain.local_graph_axis(ex.arc, ex.s) == OVER_X1:
            sp = -nu[0] / nu[1]
            return float((sp * Xw[0] - Xw[1]) / (H[1] - sp * H[0]))
        sp = -nu[1] / nu[0]
        return float(-(Xw[0] - sp * Xw[1]) / (H[0] - sp * H[1]))

    def theta_prime(self, w: float) -> float:
        """Derivative of ``w -> X1(alpha_plus(w), w)`` on a boundary graph over x1."""
        orb, ex, H, Hnu = self._gamma3_exit(w)
        nu = ex.normal
        if self.pd.domain.local_graph_axis(ex.arc, ex.s) != OVER_X1:
            raise FlowError(f"the exit at w={w} is not on a graph over x1")
        sp = -nu[0] / nu[1]
        Y = abs(float(self.jacobian_closed(w, ex.time)))
        return math.copysign(1.0, nu[1]) * Y / math.sqrt(1.0 + sp * sp) / Hnu

    def mu(self, w: float) -> float:
        """Boundary weight of the transformed boundary law."""
        orb, ex, H, Hnu = self._gamma3_exit(w)
        Y = abs(float(self.jacobian_closed(w, ex.time)))
        ap = self.alpha_plus_prime(w)
        return Y / (math.sqrt(1.0 + ap * ap) * Hnu)

    # -- inverse -------------------------------------------------------------------
    def _guess_table(self):
        """Sampled points of the cached orbits, rebuilt once the cache has grown by a quarter."""
        if self._table is None or len(self._orbits) > 1.25 * self._table[0]:
            pts, tw = [], []
            for w, orb in self._orbits.items():
                ts = orb.step_times
                if len(ts) < 16:
                    ts = np.linspace(orb.alpha_minus, orb.alpha_plus, 16)
                pts.append(orb.X(ts))
                tw.append(np.column_stack([ts, np.full(len(ts), w)]))
            tree = cKDTree(np.concatenate(pts)) if pts else None
            self._table = (len(self._orbits), tree, np.concatenate(tw) if tw else None)
        return self._table

    def initial_guess(self, p: Sequence[float]) -> tuple[float, float]:
        p = np.asarray(p, dtype=float)
        _, tree, tw = self._guess_table()
        if tree is None:
            H1, H2 = self.pd.H(float(p[0]), float(p[1]))
            return (float(p[1]) - self.h) / H2, float(p[0])
        _, k = tree.query(p)
        return float(tw[k, 0]), float(tw[k, 1])

    def inverse(self, p: Sequence[float], guess: tuple[float, float] | None = None,
                tol: float | None = None, max_iter: int = 50) -> tuple[float, float]:
        """``(t, w)`` with ``X(t, w) = p`` by Newton iteration on the chart equations."""
        p = np.asarray(p, dtype=float)
        tol = 1e-12 * self.pd.domain.diameter if tol is None else tol
        t, w = self.initial_guess(p) if guess is None else map(float, guess)
        lo, hi = self.chord
        for _ in range(max_iter):
            st = self.integrator.flow_to(w, self.h, t)
            F = st[:2] - p
            if float(np.linalg.norm(F)) <= tol:
                return t, w
            H1, H2 = self.pd.H(float(st[0]), float(st[1]))
            J = np.array([[H1, st[2]], [H2, st[3]]])
            try:
                dt, dw = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError as exc:
                raise FlowError(f"singular chart Jacobian while inverting {p.tolist()}") from exc
            t += dt
            w = min(max(w + dw, lo), hi)
        raise FlowError(f"Newton inversion of the chart did not converge for {p.tolist()}")

    # -- output ---------------------------------------------------------------------
    def orbit_rows(self, ws: Sequence[float]) -> list[tuple[float, float, float, float, float]]:
        """Rows ``(w, t, x1, x2, Y_h)`` at the integrator steps of each orbit."""
        rows = []
        for w in ws:
            orb = self.orbit(w)
            ts = orb.step_times
            X = orb.X(ts)
            Y = self.jacobian_closed(w, ts)
            rows.extend((float(w), float(t), float(x[0]), float(x[1]), float(y)) for t, x, y in zip(ts, X, Y))
        return rows


# ----------------------------------------------------------------------------
# Functional interface
# ----------------------------------------------------------------------------

def integrate_orbit(pd: ProblemData, w: float, h: float, options: IntegratorOptions | None = None) -> Orbit:
    return FlowIntegrator(pd, options).orbit(w, h)


def chart(pd: ProblemData, h: float, w: float, options: IntegratorOptions | None = None):
    """``(X, dX/dw)`` as functions of ``t`` along the orbit from ``(w, h)``."""
    orb = integrate_orbit(pd, w, h, options)
    return orb.X, orb.Xw


def jacobian_closed(pd: ProblemData, h: float, w: float, t, options: IntegratorOptions | None = None):
    return FlowChart(pd, h, options=options).jacobian_closed(w, t)


def jacobian_direct(pd: ProblemData, h: float, w: float, t, options: IntegratorOptions | None = None):
    return FlowChart(pd, h, options=options).jacobian_direct(w, t)


def alpha_plus_prime(pd: ProblemData, h: float, w: float, options: IntegratorOptions | None = None) -> float:
    return FlowChart(pd, h, options=options).alpha_plus_prime(w)


def theta_prime(pd: ProblemData, h: float, w: float, options: IntegratorOptions | None = None) -> float:
    return FlowChart(pd, h, options=options).theta_prime(w)
