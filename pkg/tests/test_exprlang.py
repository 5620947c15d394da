import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbflow.exprlang import (ExprDomainError, ExprKinkWarning, ExprSyntaxError, UnboundVariableError,
                             as_expr, derive, eval_dual, evaluate, parse, to_source)

leaf = st.one_of(st.sampled_from(["x1", "x2", "z"]),
                 st.floats(-3, 3, allow_nan=False).map(lambda v: f"{v:.3f}"))


def _combine(children):
    binary = st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(lambda t: f"({t[0]} {t[1]} {t[2]})")
    unary = st.tuples(st.sampled_from(["sin", "cos", "exp", "-"]), children).map(
        lambda t: f"{t[0]}(({t[1]}) / 4)" if t[0] != "-" else f"-({t[1]})")
    power = children.map(lambda c: f"({c})^2")
    return st.one_of(binary, unary, power)


smooth_sources = st.recursive(leaf, _combine, max_leaves=8)
points = st.tuples(*[st.floats(-1.5, 1.5, allow_nan=False)] * 3)


def test_docstring_example():
    e = parse("exp(x2)*x1 + 1")
    assert evaluate(e, x1=2.0, x2=0.0) == 3.0
    assert evaluate(derive(e, "x2"), x1=2.0, x2=0.0) == 2.0


@pytest.mark.parametrize("src, value", [
    ("2^3^2", 512.0),          # right associative
    ("-2^2", -4.0),            # power binds tighter than unary minus
    ("2**3", 8.0),
    ("1 - 2 - 3", -4.0),
    ("8 / 4 / 2", 1.0),
    ("max(1, 2) + min(1, 2)", 3.0),
    ("abs(-2.5)", 2.5),
    ("sqrt(4) * pi", 2 * math.pi),
    ("1e-3 * 1000", 1.0),
])
def test_precedence_and_functions(src, value):
    assert evaluate(parse(src)) == pytest.approx(value, rel=1e-15)


@pytest.mark.parametrize("src", ["1 +", "(x1", "x1 x2", "foo(x1)", "max(1)", "x3", "1..2", ""])
def test_syntax_errors_carry_an_offset(src):
    with pytest.raises(ExprSyntaxError) as info:
        parse(src)
    assert 0 <= info.value.position <= len(src)
    assert "offset" in str(info.value)


def test_internal_functions_are_not_parseable():
    with pytest.raises(ExprSyntaxError):
        parse("sign(x1)")


def test_domain_errors():
    with pytest.raises(ExprDomainError):
        evaluate(parse("1 / x1"), x1=0.0)
    with pytest.raises(ExprDomainError):
        evaluate(parse("log(x1)"), x1=np.array([1.0, -1.0]))
    with pytest.raises(ExprDomainError):
        evaluate(parse("sqrt(x1)"), x1=-1.0)
    with pytest.raises(ExprDomainError):
        evaluate(parse("x1 ^ 0.5"), x1=-1.0)


def test_unbound_variable():
    with pytest.raises(UnboundVariableError):
        evaluate(parse("x1 + z"), x1=1.0)


def test_variable_restriction():
    with pytest.raises(ExprSyntaxError):
        parse("z + 1", variables=("x1", "x2"))
    with pytest.raises(Exception):
        as_expr(parse("z"), variables=("x1",))


def test_constant_broadcasts_against_arrays():
    out = evaluate(parse("2"), x1=np.zeros(3))
    assert out.shape == (3,) and np.all(out == 2.0)


def test_kink_warning():
    d = derive(parse("abs(x1)"), "x1")
    with pytest.warns(ExprKinkWarning):
        evaluate(d, x1=0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert evaluate(d, x1=-2.0) == -1.0


def test_smoothness_flag():
    assert parse("sin(x1) * x2").is_smooth
    assert not parse("max(x1, 0)").is_smooth


@settings(max_examples=150, deadline=None)
@given(smooth_sources, points)
def test_printer_round_trips(src, p):
    e = parse(src)
    again = parse(to_source(e))
    x1, x2, z = p
    assert evaluate(again, x1=x1, x2=x2, z=z) == pytest.approx(evaluate(e, x1=x1, x2=x2, z=z), rel=1e-12, abs=1e-12)
    assert to_source(again) == to_source(e)


@settings(max_examples=150, deadline=None)
@given(smooth_sources, points)
def test_symbolic_derivative_matches_dual_numbers(src, p):
    e = parse(src)
    x1, x2, z = p
    dual = eval_dual(e, {"x1": x1, "x2": x2, "z": z}, ("x1", "x2", "z"))
    assert dual.value == pytest.approx(evaluate(e, x1=x1, x2=x2, z=z), rel=1e-12, abs=1e-12)
    for k, v in enumerate(("x1", "x2", "z")):
        sym = evaluate(derive(e, v), x1=x1, x2=x2, z=z)
        assert sym == pytest.approx(dual.partials[k], rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(smooth_sources, points)
def test_derivative_matches_finite_differences(src, p):
    e = parse(src)
    x1, x2, z = p
    h = 1e-6
    fd = (evaluate(e, x1=x1 + h, x2=x2, z=z) - evaluate(e, x1=x1 - h, x2=x2, z=z)) / (2 * h)
    scale = max(1.0, abs(evaluate(e, x1=x1, x2=x2, z=z)))
    assert evaluate(derive(e, "x1"), x1=x1, x2=x2, z=z) == pytest.approx(fd, abs=1e-5 * scale)


def test_vectorized_evaluation_matches_scalar():
    e = parse("sin(x1) * exp(x2) + x1^2")
    xs = np.linspace(-1, 1, 7)
    vec = evaluate(e, x1=xs, x2=xs[::-1])
    for k in range(7):
        assert vec[k] == pytest.approx(evaluate(e, x1=float(xs[k]), x2=float(xs[::-1][k])), rel=1e-15)
