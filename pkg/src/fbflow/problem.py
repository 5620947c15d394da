"""Problem data: domain, drift field H, conductivity a, boundary law beta, datum phi."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .exprlang import Expr, ExprError, as_expr, compile_expr, derive
from .geometry import Domain

FIELD_VARS = ("x1", "x2")
BETA_VARS = ("x1", "x2", "z")


class ProblemError(ValueError):
    pass


def _expr(name: str, value, variables, smooth: bool) -> Expr:
    try:
        e = as_expr(value, variables)
    except ExprError as exc:
        raise ProblemError(f"fields.{name}: {exc}") from exc
    if smooth and not e.is_smooth:
        raise ProblemError(f"fields.{name}: abs/max/min are only allowed in beta and phi")
    return e


@dataclass(frozen=True, eq=False)
class ProblemData:
    """Full input of the free-boundary problem.

    ``a`` is a 2x2 nested sequence of expressions in ``x1, x2``; ``beta`` is
    an expression in ``x1, x2, z``.
    """

    domain: Domain
    H1: Expr
    H2: Expr
    beta: Expr
    phi: Expr
    a: tuple = ((1.0, 0.0), (0.0, 1.0))
    _derived: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "H1", _expr("H1", self.H1, FIELD_VARS, smooth=True))
        set_(self, "H2", _expr("H2", self.H2, FIELD_VARS, smooth=True))
        set_(self, "beta", _expr("beta", self.beta, BETA_VARS, smooth=False))
        set_(self, "phi", _expr("phi", self.phi, FIELD_VARS, smooth=False))
        a = self.a
        if len(a) != 2 or any(len(row) != 2 for row in a):
            raise ProblemError("fields.a must be a 2x2 matrix")
        a = tuple(tuple(_expr(f"a{i + 1}{j + 1}", a[i][j], FIELD_VARS, smooth=True)
                        for j in range(2)) for i in range(2))
        set_(self, "a", a)
        d = self._derived
        d["dH"] = [[derive(self.H1, "x1"), derive(self.H1, "x2")],
                   [derive(self.H2, "x1"), derive(self.H2, "x2")]]
        d["ddH"] = [[[derive(d["dH"][i][j], v) for v in FIELD_VARS] for j in range(2)] for i in range(2)]
        d["da"] = [[[derive(a[i][j], v) for v in FIELD_VARS] for j in range(2)] for i in range(2)]
        d["dbeta"] = derive(self.beta, "z")
        fns = [compile_expr(e) for e in (self.H1, self.H2, *d["dH"][0], *d["dH"][1])]
        d["fast"] = fns

    # -- construction --------------------------------------------------------
    @classmethod
    def from_dict(cls, domain: Domain, fields: Mapping[str, Any]) -> "ProblemData":
        for key in ("H1", "H2", "beta", "phi"):
            if key not in fields:
                raise ProblemError(f"fields.{key} is required")
        a = [[fields.get("a11", "1"), fields.get("a12", "0")],
             [fields.get("a21", "0"), fields.get("a22", "1")]]
        return cls(domain, fields["H1"], fields["H2"], fields["beta"], fields["phi"], a)

    def fields_dict(self) -> dict[str, str]:
        out = {"H1": str(self.H1), "H2": str(self.H2), "beta": str(self.beta), "phi": str(self.phi)}
        for i in range(2):
            for j in range(2):
                out[f"a{i + 1}{j + 1}"] = str(self.a[i][j])
        return out

    # -- evaluation ----------------------------------------------------------
    @staticmethod
    def _ev(e: Expr, x1, x2, z=None):
        fn = compile_expr(e)
        out = fn(x1, x2, z, None)
        shape = np.broadcast(np.asarray(x1), np.asarray(x2)).shape
        return np.broadcast_to(np.asarray(out, dtype=float), shape).astype(float) if shape else float(out)

    def H(self, x1, x2):
        return self._ev(self.H1, x1, x2), self._ev(self.H2, x1, x2)

    def DH(self, x1, x2) -> np.ndarray:
        """``DH[..., i, j] = d H_i / d x_j``."""
        dH = self._derived["dH"]
        rows = [np.stack([np.asarray(self._ev(dH[i][j], x1, x2)) for j in range(2)], axis=-1)
                for i in range(2)]
        return np.stack(rows, axis=-2)

    def divH(self, x1, x2):
        dH = self._derived["dH"]
        return self._ev(dH[0][0], x1, x2) + self._ev(dH[1][1], x1, x2)

    def field_and_jacobian(self, x1: float, x2: float):
        """Scalar fast path: ``(H1, H2, dH1/dx1, dH1/dx2, dH2/dx1, dH2/dx2)``."""
        return tuple(float(f(x1, x2, None, None)) for f in self._derived["fast"])

    def a_matrix(self, x1, x2) -> np.ndarray:
        rows = [np.stack([np.asarray(self._ev(self.a[i][j], x1, x2)) for j in range(2)], axis=-1)
                for i in range(2)]
        return np.stack(rows, axis=-2)

    def grad_a(self, x1, x2) -> np.ndarray:
        """``out[..., i, j, k] = d a_ij / d x_k``."""
        da = self._derived["da"]
        return np.stack([np.stack([np.stack([np.asarray(self._ev(da[i][j][k], x1, x2))
                                             for k in range(2)], axis=-1)
                                   for j in range(2)], axis=-2)
                         for i in range(2)], axis=-3)

    def grad_a_norm(self, x1, x2):
        g = self.grad_a(x1, x2)
        return np.sqrt(np.sum(g * g, axis=(-3, -2, -1)))

    def hessian_H_norm(self, x1, x2):
        dd = self._derived["ddH"]
        acc = 0.0
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    v = np.asarray(self._ev(dd[i][j][k], x1, x2))
                    acc = acc + v * v
        return np.sqrt(acc)

    def beta_at(self, x1, x2, z):
        out = compile_expr(self.beta)(x1, x2, z, None)
        shape = np.broadcast(np.asarray(x1), np.asarray(x2), np.asarray(z)).shape
        return np.broadcast_to(np.asarray(out, dtype=float), shape).astype(float) if shape else float(out)

    def dbeta_dz(self, x1, x2, z):
        out = compile_expr(self._derived["dbeta"])(x1, x2, z, None)
        shape = np.broadcast(np.asarray(x1), np.asarray(x2), np.asarray(z)).shape
        return np.broadcast_to(np.asarray(out, dtype=float), shape).astype(float) if shape else float(out)

    def phi_at(self, x1, x2):
        return self._ev(self.phi, x1, x2)
