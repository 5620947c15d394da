import functools

import pytest

from fbflow.analysis import extract_profile, criterion_table
from fbflow.geometry import polygon, rectangle
from fbflow.problem import ProblemData
from fbflow.solver import assemble, outer_fixed_point
from fbflow.transform import build_grid, coefficients

RESOLUTIONS = (33, 65, 129)

# name -> (domain factory, fields, h)
CASES = {
    # identity square: orbits are vertical segments and the chart is a translation
    "A": (lambda: rectangle(0, 1, 0, 1, left="gamma2", right="gamma2"),
          {"H1": "0", "H2": "1", "beta": "z", "phi": "0.2"}, 0.0),
    # linear gravity: the interface of the 1D reduction sits at x2 = 0.75
    "B": (lambda: rectangle(0, 1, 0.25, 1, left="neutral", right="neutral"),
          {"H1": "0", "H2": "x2", "beta": "z", "phi": "0.5"}, 0.25),
    # criterion holds with a wide margin on every column
    "C": (lambda: rectangle(0, 1, 0.25, 1, left="neutral", right="neutral"),
          {"H1": "0", "H2": "4*x2", "beta": "z", "phi": "2+0.2*x1"}, 0.25),
    # boundary law exceeds the flux, so the criterion fails
    "V": (lambda: rectangle(0, 1, 0, 1, left="gamma2", right="gamma2"),
          {"H1": "0", "H2": "1", "beta": "z", "phi": "1.5"}, 0.0),
}

# slanted top x2 = 1.5 - 0.5 x1 gives a nonconstant exit time
def slanted_domain():
    return polygon([(0, 0.25), (1, 0.25), (1, 1), (0, 1.5)], ["gamma2", "neutral", "gamma3", "neutral"])


# field name -> (fields, closed-form Jacobian Y(w, t) at h, w range with a gamma3 exit)
JACOBIAN_FIELDS = {
    "uniform": ({"H1": "0", "H2": "1", "beta": "z", "phi": "1"}, lambda w, t, h: -1.0 + 0 * t, (0.02, 0.98)),
    "linear": ({"H1": "0", "H2": "x2", "beta": "z", "phi": "1"}, lambda w, t, h: -h * __import__("numpy").exp(t),
               (0.02, 0.98)),
    "radial": ({"H1": "x1", "H2": "x2", "beta": "z", "phi": "1"},
               lambda w, t, h: -h * __import__("numpy").exp(2 * t), (0.02, 0.24)),
}


def problem(name: str) -> ProblemData:
    dom, fields, _ = CASES[name]
    return ProblemData.from_dict(dom(), fields)


def case_config(name: str, n: int = 33, out: str = "out") -> dict:
    dom, fields, h = CASES[name]
    return {"geometry": dom().to_dict(), "fields": dict(fields), "flow": {"h": h},
            "grid": {"N_w": n, "N_s": n}, "outputs": {"directory": str(out)}}


@functools.lru_cache(maxsize=None)
def solved(name: str, n: int):
    """``(grid, system, pair)`` for a named case at an ``n x n`` grid; cached per session."""
    _, _, h = CASES[name]
    grid = build_grid(problem(name), h, N_w=n, N_s=n)
    system = assemble(grid, coefficients(grid))
    pair = outer_fixed_point(system)
    return grid, system, pair


@functools.lru_cache(maxsize=None)
def profiled(name: str, n: int):
    grid, system, pair = solved(name, n)
    profile = extract_profile(pair, grid)
    crit = criterion_table(profile, grid)
    return profile, crit


@pytest.fixture
def solve_case():
    return solved
