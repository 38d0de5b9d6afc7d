import numpy as np
import pytest

from balance_att.balancing import balancing_objective
from balance_att.solver import (
    FitResult,
    PenaltyPlan,
    SolverError,
    kkt_residual,
    minimize_composite,
    penalty_value,
    soft_threshold,
)
from conftest import make_dataset


def quadratic(b, a=None):
    b = np.asarray(b, float)
    a = np.ones_like(b) if a is None else np.asarray(a, float)

    def loss(x):
        r = x - b
        return 0.5 * float(a @ (r * r)), a * r

    return loss


@pytest.mark.parametrize("v,t,out", [(1.0, 0.3, 0.7), (-0.2, 0.3, 0.0), (2.5, 0.0, 2.5), (-1.5, 0.5, -1.0)])
def test_soft_threshold_examples(v, t, out):
    assert soft_threshold(v, t) == pytest.approx(out)


def test_soft_threshold_rejects_negative():
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


def test_unpenalized_quadratic():
    b = np.array([1.0, -2.0, 3.5])
    res = minimize_composite(quadratic(b), PenaltyPlan.unpenalized(3))
    assert res.converged
    np.testing.assert_allclose(res.coef, b, atol=1e-7)


def test_penalized_scalar_matches_soft_threshold():
    res = minimize_composite(quadratic([1.0]), PenaltyPlan(0.3, [1.0]))
    assert res.converged
    assert res.coef[0] == pytest.approx(0.7, abs=1e-7)


def test_intercept_only_balancing_closed_form():
    n1, n0 = 30, 70
    from balance_att.data_model import Dataset

    d = np.r_[np.ones(n1), np.zeros(n0)]
    ds = Dataset(np.zeros(100), d, np.ones((100, 1)), ("(intercept)",), 0)
    res = minimize_composite(balancing_objective(ds), PenaltyPlan(1.0, [1.0], [True]), [0.0])
    assert res.converged
    assert res.coef[0] == pytest.approx(np.log(30 / 70), abs=1e-6)
    assert np.log(30 / 70) == pytest.approx(-0.84730, abs=1e-5)


def test_kkt_residual_examples():
    b = np.array([0.5, -1.0])
    loss = quadratic(b)
    assert kkt_residual(loss, PenaltyPlan.unpenalized(2), b) == pytest.approx(0.0)
    # zero is optimal when the penalty dominates the gradient at zero
    assert kkt_residual(loss, PenaltyPlan(2.0, [1.0, 1.0]), np.zeros(2)) == 0.0
    # displaced by delta from the optimum of a 1-D quadratic with curvature a
    a, delta = 3.0, 0.25
    one = quadratic([2.0], [a])
    assert kkt_residual(one, PenaltyPlan.unpenalized(1), [2.0 + delta]) == pytest.approx(abs(delta) * a)


def test_objective_nonincreasing_along_path():
    ds = make_dataset(n=300, p=8, seed=3)
    loss = balancing_objective(ds)
    ex = np.zeros(ds.p, bool)
    ex[0] = True
    plan = PenaltyPlan(0.02, np.ones(ds.p), ex)
    objs = [minimize_composite(loss, plan, np.zeros(ds.p), tol=1e-12, max_iter=k).objective
            for k in range(0, 40)]
    assert all(b <= a + 1e-15 for a, b in zip(objs, objs[1:]))


def test_converged_fit_certificate():
    ds = make_dataset(n=400, p=10, seed=5)
    loss = balancing_objective(ds)
    ex = np.zeros(ds.p, bool)
    ex[0] = True
    plan = PenaltyPlan(0.05, np.linspace(0.5, 1.5, ds.p), ex)
    res = minimize_composite(loss, plan, np.zeros(ds.p))
    assert res.converged
    assert kkt_residual(loss, plan, res.coef) <= 1e-7
    assert res.objective == pytest.approx(loss(res.coef)[0] + penalty_value(plan, res.coef))


def test_max_iter_reports_not_converged():
    res = minimize_composite(quadratic([1.0, 2.0], [1.0, 1e4]), PenaltyPlan.unpenalized(2),
                             max_iter=1, accelerate=False)
    assert isinstance(res, FitResult)
    assert not res.converged and res.iterations == 1


def test_nonfinite_start_raises():
    def bad(x):
        return float("nan"), np.zeros_like(x)

    with pytest.raises(SolverError):
        minimize_composite(bad, PenaltyPlan.unpenalized(2))


def test_plan_validation():
    with pytest.raises(ValueError):
        PenaltyPlan(-1.0, [1.0])
    with pytest.raises(ValueError):
        PenaltyPlan(1.0, [1.0, -1.0])
    with pytest.raises(ValueError):
        PenaltyPlan(1.0, [1.0], [True, False])
    plan = PenaltyPlan(0.5, [2.0, 4.0], [True, False])
    np.testing.assert_allclose(plan.weights, [0.0, 2.0])
