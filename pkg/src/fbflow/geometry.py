"""Boundary representation of the domain and sampled assumption checks.

The domain is a single positively oriented loop of parametric arcs, each
carrying one of the labels ``gamma2`` (homogeneous Dirichlet part),
``gamma3`` (part carrying the boundary law) or ``neutral`` (no-flux).
Queries work against the exact arcs; a dense polyline is kept only to
locate candidates quickly and to decide inside/outside far from the
boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .exprlang import Expr, as_expr, derive, evaluate

LABELS = ("gamma2", "gamma3", "neutral")
INSIDE, OUTSIDE, BOUNDARY = "inside", "outside", "boundary"
OVER_X1, OVER_X2 = "over_x1", "over_x2"


class GeometryError(ValueError):
    pass


def normalize_label(label: str) -> str:
    key = str(label).strip().lower().replace("_", "").replace("γ", "gamma")
    aliases = {"gamma2": "gamma2", "g2": "gamma2", "dirichlet": "gamma2",
               "gamma3": "gamma3", "g3": "gamma3",
               "neutral": "neutral", "natural": "neutral", "none": "neutral"}
    if key not in aliases:
        raise GeometryError(f"unknown boundary label {label!r}; expected one of {LABELS}")
    return aliases[key]


# ----------------------------------------------------------------------------
# Arcs
# ----------------------------------------------------------------------------

class BoundaryArc:
    """Parametric C1 curve ``s -> (x1(s), x2(s))`` on ``[0, 1]``."""

    kind = "abstract"

    def __init__(self, label: str):
        self.label = normalize_label(label)

    def point(self, s):
        raise NotImplementedError

    def tangent(self, s):
        raise NotImplementedError

    def curvature_vector(self, s):
        raise NotImplementedError

    @property
    def is_straight(self) -> bool:
        return False

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


class SegmentArc(BoundaryArc):
    kind = "segment"

    def __init__(self, start: Sequence[float], end: Sequence[float], label: str):
        super().__init__(label)
        self.start = np.asarray(start, dtype=float)
        self.end = np.asarray(end, dtype=float)
        if self.start.shape != (2,) or self.end.shape != (2,):
            raise GeometryError("segment endpoints must be 2-vectors")
        if np.linalg.norm(self.end - self.start) == 0:
            raise GeometryError("degenerate segment")

    @property
    def is_straight(self) -> bool:
        return True

    def point(self, s):
        s = np.asarray(s, dtype=float)
        return self.start + s[..., None] * (self.end - self.start)

    def tangent(self, s):
        s = np.asarray(s, dtype=float)
        return np.broadcast_to(self.end - self.start, s.shape + (2,)).copy()

    def curvature_vector(self, s):
        s = np.asarray(s, dtype=float)
        return np.zeros(s.shape + (2,))

    def to_dict(self):
        return {"type": "segment", "from": self.start.tolist(), "to": self.end.tolist(),
                "label": self.label}


class ExprArc(BoundaryArc):
    """Arc given by two expressions in the parameter ``s``."""

    kind = "curve"

    def __init__(self, x1: str | Expr, x2: str | Expr, label: str):
        super().__init__(label)
        self.x1 = as_expr(x1, ("s",))
        self.x2 = as_expr(x2, ("s",))
        self.dx1, self.dx2 = derive(self.x1, "s"), derive(self.x2, "s")
        self.ddx1, self.ddx2 = derive(self.dx1, "s"), derive(self.dx2, "s")

    def _pair(self, ex, ey, s):
        s = np.asarray(s, dtype=float)
        a = np.broadcast_to(np.asarray(evaluate(ex, s=s), dtype=float), s.shape)
        b = np.broadcast_to(np.asarray(evaluate(ey, s=s), dtype=float), s.shape)
        return np.stack([a, b], axis=-1)

    def point(self, s):
        return self._pair(self.x1, self.x2, s)

    def tangent(self, s):
        return self._pair(self.dx1, self.dx2, s)

    def curvature_vector(self, s):
        return self._pair(self.ddx1, self.ddx2, s)

    def to_dict(self):
        return {"type": "curve", "x1": str(self.x1), "x2": str(self.x2), "label": self.label}


class SplineArc(BoundaryArc):
    """Cubic spline through control points, chord-length parametrized."""

    kind = "spline"

    def __init__(self, points: Sequence[Sequence[float]], label: str):
        super().__init__(label)
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise GeometryError("spline needs at least two 2-D control points")
        chord = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))]
        if np.any(np.diff(chord) <= 0):
            raise GeometryError("spline control points must be distinct")
        self.points = pts
        self._spline = CubicSpline(chord / chord[-1], pts, bc_type="natural")

    def point(self, s):
        return self._spline(np.asarray(s, dtype=float))

    def tangent(self, s):
        return self._spline(np.asarray(s, dtype=float), 1)

    def curvature_vector(self, s):
        return self._spline(np.asarray(s, dtype=float), 2)

    def to_dict(self):
        return {"type": "spline", "points": self.points.tolist(), "label": self.label}


def arc_from_dict(spec: dict[str, Any]) -> BoundaryArc:
    kind = spec.get("type", "segment")
    label = spec.get("label", "neutral")
    if kind == "segment":
        return SegmentArc(spec["from"], spec["to"], label)
    if kind == "curve":
        return ExprArc(spec["x1"], spec["x2"], label)
    if kind == "spline":
        return SplineArc(spec["points"], label)
    raise GeometryError(f"unknown arc type {kind!r}")


def polygon(vertices: Sequence[Sequence[float]], labels: Sequence[str]) -> "Domain":
    """Closed polygon; edge ``i`` runs from vertex ``i`` to vertex ``i+1``."""
    v = [np.asarray(p, dtype=float) for p in vertices]
    if len(labels) != len(v):
        raise GeometryError("one label per polygon edge is required")
    return Domain([SegmentArc(v[i], v[(i + 1) % len(v)], labels[i]) for i in range(len(v))])


def rectangle(x0: float, x1: float, y0: float, y1: float,
              bottom="gamma2", right="gamma2", top="gamma3", left="gamma2") -> "Domain":
    return polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], [bottom, right, top, left])


# ----------------------------------------------------------------------------
# Domain
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Projection:
    distance: float
    arc: int
    s: float
    point: np.ndarray


class Domain:
    """Bounded planar domain enclosed by a positively oriented loop of arcs."""

    def __init__(self, arcs: Sequence[BoundaryArc], samples_per_curve: int = 1024):
        if not arcs:
            raise GeometryError("a domain needs at least one arc")
        self.arcs = list(arcs)
        polys, owners, params = [], [], []
        sag = np.zeros(len(self.arcs))
        for i, arc in enumerate(self.arcs):
            n = 1 if arc.is_straight else samples_per_curve
            s = np.linspace(0.0, 1.0, n + 1)
            pts = arc.point(s)
            tang = np.linalg.norm(arc.tangent(s), axis=-1)
            if np.any(tang <= 1e-12):
                raise GeometryError(f"arc {i} has a vanishing tangent")
            if not arc.is_straight:
                mid = arc.point(0.5 * (s[1:] + s[:-1]))
                chord_mid = 0.5 * (pts[1:] + pts[:-1])
                sag[i] = float(np.max(np.linalg.norm(mid - chord_mid, axis=1)))
            polys.append(pts[:-1])
            owners.append(np.full(n, i))
            params.append(np.stack([s[:-1], s[1:]], axis=1))
        self._vertices = np.concatenate(polys)
        self._seg_arc = np.concatenate(owners)
        self._seg_s = np.concatenate(params)
        self._seg_a = self._vertices
        self._seg_b = np.roll(self._vertices, -1, axis=0)
        self._sag = sag
        lo, hi = self._vertices.min(axis=0), self._vertices.max(axis=0)
        self.bbox = (float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))
        self.diameter = float(np.linalg.norm(hi - lo))
        self.band = 1e-10 * self.diameter
        # closure: consecutive arcs must meet
        for i, arc in enumerate(self.arcs):
            nxt = self.arcs[(i + 1) % len(self.arcs)]
            gap = np.linalg.norm(arc.point(1.0) - nxt.point(0.0))
            if gap > 1e-9 * self.diameter:
                raise GeometryError(f"arc {i} does not end where arc {(i + 1) % len(self.arcs)} starts (gap {gap:.3e})")
        x, y = self._seg_a[:, 0], self._seg_a[:, 1]
        xb, yb = self._seg_b[:, 0], self._seg_b[:, 1]
        self.area = 0.5 * float(np.sum(x * yb - xb * y))
        if self.area <= 0:
            raise GeometryError("boundary must be positively oriented (counter-clockwise)")
        self._check_labels()
        self._seg_d = self._seg_b - self._seg_a
        self._seg_len2 = np.einsum("ij,ij->i", self._seg_d, self._seg_d)

    # -- labels ---------------------------------------------------------------
    def _check_labels(self):
        labels = [a.label for a in self.arcs]
        if "gamma2" not in labels:
            raise GeometryError("gamma2 must be nonempty")
        if "gamma3" not in labels:
            raise GeometryError("gamma3 must be nonempty")
        n = len(labels)
        runs = sum(1 for i in range(n) if labels[i] == "gamma3" and labels[i - 1] != "gamma3")
        if runs != 1 and not all(l == "gamma3" for l in labels):
            raise GeometryError("gamma3 must be one connected run of arcs")

    @property
    def labels(self) -> list[str]:
        return [a.label for a in self.arcs]

    def arc_indices(self, label: str) -> list[int]:
        return [i for i, a in enumerate(self.arcs) if a.label == label]

    @classmethod
    def from_dict(cls, spec: dict[str, Any]) -> "Domain":
        if "arcs" not in spec or not isinstance(spec["arcs"], list):
            raise GeometryError("geometry.arcs must be a list")
        return cls([arc_from_dict(a) for a in spec["arcs"]])

    def to_dict(self) -> dict[str, Any]:
        return {"arcs": [a.to_dict() for a in self.arcs]}

    # -- local frame ---------------------------------------------------------
    def tangent(self, arc_index: int, s: float) -> np.ndarray:
        t = np.asarray(self.arcs[arc_index].tangent(s), dtype=float)
        n = np.linalg.norm(t, axis=-1, keepdims=True)
        if np.any(n <= 1e-12):
            raise GeometryError("degenerate tangent")
        return t / n

    def normal(self, arc_index: int, s: float) -> np.ndarray:
        """Outward unit normal (the tangent rotated clockwise)."""
        t = self.tangent(arc_index, s)
        return np.stack([t[..., 1], -t[..., 0]], axis=-1)

    def local_graph_axis(self, arc_index: int, s: float) -> str:
        nu = self.normal(arc_index, s)
        return OVER_X1 if abs(nu[1]) >= abs(nu[0]) else OVER_X2

    # -- distance and classification ----------------------------------------
    def _polyline_distance(self, p: np.ndarray):
        rel = p - self._seg_a
        lam = np.clip(np.einsum("ij,ij->i", rel, self._seg_d) / self._seg_len2, 0.0, 1.0)
        diff = rel - lam[:, None] * self._seg_d
        d2 = np.einsum("ij,ij->i", diff, diff)
        k = int(np.argmin(d2))
        return k, float(lam[k]), math.sqrt(d2[k])

    def _polyline_inside(self, p: np.ndarray) -> bool:
        ya, yb = self._seg_a[:, 1], self._seg_b[:, 1]
        cond = (ya > p[1]) != (yb > p[1])
        if not np.any(cond):
            return False
        xa, xb = self._seg_a[cond, 0], self._seg_b[cond, 0]
        ya, yb = ya[cond], yb[cond]
        xcross = xa + (p[1] - ya) * (xb - xa) / (yb - ya)
        return bool(np.count_nonzero(xcross > p[0]) % 2 == 1)

    def project(self, p: Sequence[float]) -> Projection:
        """Closest boundary point, refined on the exact arc."""
        p = np.asarray(p, dtype=float)
        k, lam, dist = self._polyline_distance(p)
        i = int(self._seg_arc[k])
        s0, s1 = self._seg_s[k]
        s = s0 + lam * (s1 - s0)
        arc = self.arcs[i]
        if arc.is_straight:
            return Projection(dist, i, float(s), arc.point(s))
        for _ in range(30):
            c = arc.point(s)
            d1 = arc.tangent(s)
            d2 = arc.curvature_vector(s)
            g = float(np.dot(c - p, d1))
            gp = float(np.dot(d1, d1) + np.dot(c - p, d2))
            if gp <= 0:
                break
            s_new = min(1.0, max(0.0, s - g / gp))
            if abs(s_new - s) < 1e-15:
                s = s_new
                break
            s = s_new
        c = arc.point(s)
        return Projection(float(np.linalg.norm(c - p)), i, float(s), c)

    def signed_distance(self, p: Sequence[float]) -> float:
        """Distance to the boundary, positive inside."""
        p = np.asarray(p, dtype=float)
        proj = self.project(p)
        d = proj.distance
        if d == 0.0:
            return 0.0
        sag = self._sag[proj.arc]
        at_end = proj.s <= 1e-12 or proj.s >= 1 - 1e-12
        if sag > 0 and d <= 8 * sag + 1e-12 * self.diameter and not at_end:
            nu = self.normal(proj.arc, proj.s)
            inside = float(np.dot(p - proj.point, nu)) < 0
        else:
            inside = self._polyline_inside(p)
        return d if inside else -d

    def contains(self, p: Sequence[float], tol: float | None = None) -> str:
        tol = self.band if tol is None else tol
        sd = self.signed_distance(p)
        if abs(sd) <= tol:
            return BOUNDARY
        return INSIDE if sd > 0 else OUTSIDE

    def labels_near(self, p: Sequence[float], tol: float | None = None) -> set[str]:
        """Labels of every arc passing within ``tol`` of ``p``."""
        tol = 1e-8 * self.diameter if tol is None else tol
        p = np.asarray(p, dtype=float)
        rel = p - self._seg_a
        lam = np.clip(np.einsum("ij,ij->i", rel, self._seg_d) / self._seg_len2, 0.0, 1.0)
        diff = rel - lam[:, None] * self._seg_d
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        near = set(int(a) for a in self._seg_arc[d <= tol + self._sag[self._seg_arc]])
        out = set()
        for i in near:
            arc = self.arcs[i]
            if arc.is_straight or self._exact_arc_distance(i, p) <= tol:
                out.add(arc.label)
        return out

    def arcs_near(self, p: Sequence[float], tol: float | None = None) -> list[tuple[int, float]]:
        """``(arc, s)`` of each arc within ``tol`` of ``p`` (closest point)."""
        tol = 1e-8 * self.diameter if tol is None else tol
        p = np.asarray(p, dtype=float)
        out = []
        for i, arc in enumerate(self.arcs):
            d, s = self._exact_arc_projection(i, p)
            if d <= tol:
                out.append((i, s))
        return out

    def _exact_arc_projection(self, i: int, p: np.ndarray) -> tuple[float, float]:
        arc = self.arcs[i]
        mask = self._seg_arc == i
        a, dvec, l2 = self._seg_a[mask], self._seg_d[mask], self._seg_len2[mask]
        rel = p - a
        lam = np.clip(np.einsum("ij,ij->i", rel, dvec) / l2, 0.0, 1.0)
        diff = rel - lam[:, None] * dvec
        k = int(np.argmin(np.einsum("ij,ij->i", diff, diff)))
        s0, s1 = self._seg_s[mask][k]
        s = s0 + lam[k] * (s1 - s0)
        if not arc.is_straight:
            for _ in range(30):
                c, d1, d2 = arc.point(s), arc.tangent(s), arc.curvature_vector(s)
                g = float(np.dot(c - p, d1))
                gp = float(np.dot(d1, d1) + np.dot(c - p, d2))
                if gp <= 0:
                    break
                s_new = min(1.0, max(0.0, s - g / gp))
                if abs(s_new - s) < 1e-15:
                    s = s_new
                    break
                s = s_new
        return float(np.linalg.norm(arc.point(s) - p)), float(s)

    def _exact_arc_distance(self, i: int, p: np.ndarray) -> float:
        return self._exact_arc_projection(i, p)[0]

    def first_crossing(self, p: Sequence[float], q: Sequence[float], samples: int = 64):
        """First boundary crossing on the segment ``p -> q``.

        Returns ``(arc_index, s, point)``; raises :class:`GeometryError` when
        the segment never leaves the domain.
        """
        p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
        lams = np.linspace(0.0, 1.0, samples + 1)
        lo = 0.0
        hi = None
        for lam in lams[1:]:
            if self.signed_distance(p + lam * (q - p)) <= self.band:
                hi = lam
                break
            lo = lam
        if hi is None:
            raise GeometryError("segment does not reach the boundary")
        while hi - lo > 1e-13:
            mid = 0.5 * (lo + hi)
            if self.signed_distance(p + mid * (q - p)) > 0:
                lo = mid
            else:
                hi = mid
        lam = 0.5 * (lo + hi)
        point = p + lam * (q - p)
        proj = self.project(point)
        return proj.arc, proj.s, point

    # -- sampling helpers ----------------------------------------------------
    def boundary_samples(self, n: int, label: str | None = None):
        """``(arc, s, point)`` triples spread over arcs proportionally to length."""
        idx = [i for i, a in enumerate(self.arcs) if label is None or a.label == label]
        lengths = []
        for i in idx:
            s = np.linspace(0, 1, 65)
            pts = self.arcs[i].point(s)
            lengths.append(float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1))))
        total = sum(lengths)
        out = []
        for i, L in zip(idx, lengths):
            m = max(2, int(round(n * L / total)))
            for s in np.linspace(0.0, 1.0, m):
                out.append((i, float(s), self.arcs[i].point(s)))
        return out

    def interior_lattice(self, n: int) -> np.ndarray:
        x0, x1, y0, y1 = self.bbox
        xs = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
        ys = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        keep = [self.signed_distance(p) > self.band for p in pts]
        return pts[np.asarray(keep, dtype=bool)]

    def chord(self, h: float) -> tuple[float, float]:
        """``(w1, w2)``: the extent of the domain on the line ``x2 = h``.

        The domain must cut the line in a single interval.
        """
        a, b = self._seg_a, self._seg_b
        xs = []
        for i, arc in enumerate(self.arcs):
            mask = self._seg_arc == i
            for (pa, pb), (s0, s1) in zip(zip(a[mask], b[mask]), self._seg_s[mask]):
                lo_, hi_ = min(pa[1], pb[1]), max(pa[1], pb[1])
                if lo_ <= h <= hi_ and pa[1] != pb[1]:
                    lam = (h - pa[1]) / (pb[1] - pa[1])
                    s = s0 + lam * (s1 - s0)
                    if not arc.is_straight:
                        for _ in range(50):
                            y = arc.point(s)[1] - h
                            dy = arc.tangent(s)[1]
                            if dy == 0:
                                break
                            s = min(1.0, max(0.0, s - y / dy))
                            if abs(y) < 1e-15:
                                break
                    xs.append(float(arc.point(s)[0]))
        if len(xs) < 2:
            raise GeometryError(f"the line x2 = {h} does not cross the domain")
        return min(xs), max(xs)


# ----------------------------------------------------------------------------
# Sampled assumption checks
# ----------------------------------------------------------------------------

@dataclass
class AssumptionCheck:
    status: str  # "pass", "fail" or "sampled"
    value: float | None = None
    witness: list[float] | None = None
    note: str = ""

    def to_dict(self):
        return {"status": self.status, "value": self.value, "witness": self.witness, "note": self.note}


@dataclass
class ValidationReport:
    checks: dict[str, AssumptionCheck] = field(default_factory=dict)
    constants: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, ok: bool, value=None, witness=None, note="", sampled=False):
        if not ok and witness is None:
            raise ValueError("a failing check needs a witness point")
        status = "fail" if not ok else ("sampled" if sampled else "pass")
        wit = None if witness is None else [float(v) for v in np.ravel(witness)]
        self.checks[name] = AssumptionCheck(status, None if value is None else float(value), wit, note)

    @property
    def failures(self) -> list[str]:
        return [k for k, c in self.checks.items() if c.status == "fail"]

    def passed(self, names: Sequence[str] | None = None) -> bool:
        names = list(self.checks) if names is None else names
        return all(self.checks[n].status != "fail" for n in names if n in self.checks)

    def to_dict(self):
        return {"checks": {k: v.to_dict() for k, v in self.checks.items()},
                "constants": dict(self.constants),
                "failures": self.failures}


PROBLEM_ASSUMPTIONS = ("a_bounded", "a_elliptic", "H_bounded", "H2_positive", "div_H_nonnegative",
                       "outflow_on_gamma3", "beta_continuous", "beta_zero_at_zero", "beta_monotone")
CONTINUITY_ASSUMPTIONS = ("H_c11", "a_holder", "c0_finite", "gamma3_c1")


def validate(pd, samples: int = 64, boundary_samples: int = 512, z_samples: int = 41) -> ValidationReport:
    """Sample the structural assumptions on ``pd`` and record margins.

    Failures are report entries with witness points, never exceptions.
    """
    rep = ValidationReport()
    dom = pd.domain
    pts = dom.interior_lattice(samples)
    x1, x2 = pts[:, 0], pts[:, 1]

    a = pd.a_matrix(x1, x2)
    Lam = float(np.max(np.abs(a)))
    k = int(np.argmax(np.max(np.abs(a).reshape(len(pts), -1), axis=1)))
    rep.add("a_bounded", np.isfinite(Lam), Lam, None if np.isfinite(Lam) else pts[k],
            note="max |a_ij| over the interior lattice")
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    eig = np.linalg.eigvalsh(sym)[:, 0]
    lam = float(eig.min())
    k = int(np.argmin(eig))
    rep.add("a_elliptic", lam > 0, lam, None if lam > 0 else pts[k],
            note="smallest eigenvalue of the symmetric part of a")

    H1, H2 = pd.H(x1, x2)
    Hbar = float(max(np.max(np.abs(H1)), np.max(np.abs(H2))))
    rep.add("H_bounded", np.isfinite(Hbar), float(np.max(np.abs(H1))), None, note="max |H1|")
    Hlow = float(np.min(H2))
    k = int(np.argmin(H2))
    rep.add("H2_positive", Hlow > 0, Hlow, None if Hlow > 0 else pts[k], note="min H2 (must be positive)")
    div = pd.divH(x1, x2)
    dmin = float(np.min(div))
    k = int(np.argmin(div))
    tol_div = 1e-12 * max(1.0, Hbar / max(dom.diameter, 1e-300))
    rep.add("div_H_nonnegative", dmin >= -tol_div, dmin, None if dmin >= -tol_div else pts[k], note="min div H")

    bsamp = dom.boundary_samples(boundary_samples, "gamma3")
    bpts = np.array([p for _, _, p in bsamp])
    nus = np.array([dom.normal(i, s) for i, s, _ in bsamp])
    bH1, bH2 = pd.H(bpts[:, 0], bpts[:, 1])
    flux = bH1 * nus[:, 0] + bH2 * nus[:, 1]
    fmin = float(np.min(flux))
    k = int(np.argmin(flux))
    rep.add("outflow_on_gamma3", fmin > 0, fmin, None if fmin > 0 else bpts[k], note="min H.nu on gamma3")

    phi_b = pd.phi_at(bpts[:, 0], bpts[:, 1])
    zmax = 2.0 * float(np.max(np.abs(phi_b))) + 1.0
    zs = np.linspace(-zmax, zmax, z_samples)
    B = np.empty((len(bpts), len(zs)))
    ok_cont, wit = True, None
    for j, z in enumerate(zs):
        try:
            B[:, j] = pd.beta_at(bpts[:, 0], bpts[:, 1], np.full(len(bpts), z))
        except ArithmeticError:
            ok_cont, wit = False, [bpts[0, 0], bpts[0, 1], z]
            break
    if ok_cont and not np.all(np.isfinite(B)):
        bad = np.argwhere(~np.isfinite(B))[0]
        ok_cont, wit = False, [bpts[bad[0], 0], bpts[bad[0], 1], zs[bad[1]]]
    rep.add("beta_continuous", ok_cont, None, wit, sampled=True, note=f"beta evaluable on z in [-{zmax:g}, {zmax:g}]")
    b0 = pd.beta_at(bpts[:, 0], bpts[:, 1], np.zeros(len(bpts)))
    k = int(np.argmax(np.abs(b0)))
    ok = float(np.max(np.abs(b0))) <= 1e-14
    rep.add("beta_zero_at_zero", ok, float(np.max(np.abs(b0))), None if ok else bpts[k], note="max |beta(x, 0)|")
    if ok_cont:
        steps = np.diff(B, axis=1)
        worst = float(steps.min())
        ok = worst >= -1e-14 * max(1.0, float(np.max(np.abs(B))))
        wi = np.unravel_index(int(np.argmin(steps)), steps.shape)
        rep.add("beta_monotone", ok, worst, None if ok else [bpts[wi[0], 0], bpts[wi[0], 1], zs[wi[1]]],
                sampled=True, note="smallest increment of beta(x, .) on the z grid")
    else:
        rep.add("beta_monotone", False, None, wit, note="beta not evaluable")

    # extra regularity used by the continuity criterion
    D2 = pd.hessian_H_norm(x1, x2)
    rep.add("H_c11", bool(np.all(np.isfinite(D2))), float(np.max(D2)) if len(D2) else 0.0,
            None if np.all(np.isfinite(D2)) else pts[int(np.argmax(~np.isfinite(D2)))],
            sampled=True, note="max |D^2 H| on the lattice (C^{1,1} proxy)")
    grad_a = pd.grad_a_norm(x1, x2)
    rep.add("a_holder", bool(np.all(np.isfinite(grad_a))), float(np.max(grad_a)) if len(grad_a) else 0.0,
            None if np.all(np.isfinite(grad_a)) else pts[int(np.argmax(~np.isfinite(grad_a)))],
            sampled=True, note="max |grad a| (Lipschitz, hence Hoelder, proxy)")
    c0 = _sample_c0(pd, pts)
    rep.add("c0_finite", np.isfinite(c0), c0, None, sampled=True,
            note="sup over sampled (x, y) of div_x(a(x)(x - y))")
    ok, wit = _gamma3_joints_c1(dom)
    rep.add("gamma3_c1", ok, None, wit, sampled=True, note="tangent continuity at joints inside gamma3")
    ok, wit = _boundary_c1(dom)
    rep.add("boundary_c1", ok, None, wit,
            note="tangent continuity at every joint; corners are tolerated by the solver")
    n_neutral = sum(arc.label == "neutral" for arc in dom.arcs)
    rep.add("neutral_condition", True, n_neutral, None, sampled=n_neutral > 0,
            note="no-flux condition assumed on neutral arcs (value: number of such arcs)")

    rep.constants.update({"lambda": lam, "Lambda": Lam, "H_bar": Hbar, "H_low": Hlow,
                          "div_H_min": dmin, "c0": c0, "H_nu_min_gamma3": fmin})
    return rep


def _sample_c0(pd, pts: np.ndarray, max_y: int = 256) -> float:
    if len(pts) == 0:
        return float("nan")
    x1, x2 = pts[:, 0], pts[:, 1]
    a = pd.a_matrix(x1, x2)
    da = pd.grad_a(x1, x2)  # (..., i, j, k) = d a_ij / d x_k
    trace = a[:, 0, 0] + a[:, 1, 1]
    # div_x(a(x)(x - y)) = tr a(x) + sum_ij d_i a_ij (x_j - y_j)
    v = np.stack([da[:, 0, 0, 0] + da[:, 1, 0, 1], da[:, 0, 1, 0] + da[:, 1, 1, 1]], axis=1)
    step = max(1, len(pts) // max_y)
    ys = pts[::step]
    vals = trace[:, None] + np.einsum("nj,nmj->nm", v, pts[:, None, :] - ys[None, :, :])
    return float(np.max(vals))


def _joint_angle(dom: Domain, i: int) -> tuple[float, np.ndarray]:
    nxt = (i + 1) % len(dom.arcs)
    t0 = dom.tangent(i, 1.0)
    t1 = dom.tangent(nxt, 0.0)
    return float(np.linalg.norm(t0 - t1)), dom.arcs[i].point(1.0)


def _gamma3_joints_c1(dom: Domain):
    n = len(dom.arcs)
    for i in range(n):
        j = (i + 1) % n
        if dom.arcs[i].label == "gamma3" and dom.arcs[j].label == "gamma3" and n > 1:
            gap, p = _joint_angle(dom, i)
            if gap > 1e-9:
                return False, p
    return True, None


def _boundary_c1(dom: Domain):
    for i in range(len(dom.arcs)):
        gap, p = _joint_angle(dom, i)
        if gap > 1e-9:
            return False, p
    return True, None
