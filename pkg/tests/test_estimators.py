import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fbflow.estimators import FlowChart, FreeBoundarySolver

from conftest import CASES


def problem_dicts(name):
    dom, fields, h = CASES[name]
    return dom().to_dict(), dict(fields), h


def test_flow_chart_transform_round_trip():
    geometry, fields, h = problem_dicts("B")
    chart = FlowChart(geometry, fields, h=h).fit()
    TW = np.array([[0.2, 0.3], [1.0, 0.8]])
    P = chart.transform(TW)
    assert P == pytest.approx(np.c_[TW[:, 1], 0.25 * np.exp(TW[:, 0])], rel=1e-9)
    assert chart.inverse_transform(P) == pytest.approx(TW, abs=1e-9)
    assert chart.jacobian(TW) == pytest.approx(-0.25 * np.exp(TW[:, 0]), rel=1e-9)
    assert chart.w_range_ == (0.0, 1.0)


def test_flow_chart_fit_transform_and_errors():
    geometry, fields, h = problem_dicts("A")
    with pytest.raises(NotFittedError):
        FlowChart(geometry, fields).transform([[0.1, 0.1]])
    out = FlowChart(geometry, fields, h=h).fit_transform(np.array([[0.5, 0.5]]))
    assert out == pytest.approx(np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError, match="shape"):
        FlowChart(geometry, fields, h=h).fit().transform([0.1, 0.2, 0.3])


def test_params_round_trip_through_clone():
    geometry, fields, h = problem_dicts("B")
    est = FreeBoundarySolver(geometry, fields, h=h, N_w=9, N_s=9, omega=0.7)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    twin.set_params(N_w=5)
    assert twin.N_w == 5 and est.N_w == 9


def test_solver_fit_predict():
    geometry, fields, h = problem_dicts("B")
    est = FreeBoundarySolver(geometry, fields, h=h, N_w=9, N_s=33).fit()
    assert est.converged_
    phi = est.predict(np.array([[0.1], [0.55]]))
    # interface at x2 = 0.75, i.e. t = log(3), within a couple of cells
    assert phi == pytest.approx([np.log(3.0)] * 2, abs=2 * np.log(4.0) / 32)
    U, CHI = est.state()
    assert U.shape == (9, 33) and np.all(CHI >= 0)
    assert est.residuals_["weak_residual_interior"] < 1e-10
    assert all(c["holds"] for c in est.criterion_)
    with pytest.raises(ValueError):
        est.predict([2.0])


def test_solver_not_fitted():
    with pytest.raises(NotFittedError):
        FreeBoundarySolver().predict([0.5])
