import numpy as np
import pytest
from statistics import NormalDist

from balance_att.balancing import (
    OverflowGuardError,
    balancing_loss,
    balancing_objective,
    beta_loadings,
    control_weights,
    fit_balancing_lowdim,
    fit_balancing_penalized,
    initial_beta,
    iterate_beta_loadings,
    lambda_level,
    logit_lasso_fit,
    logit_objective,
)
from balance_att.data_model import Dataset
from balance_att.simulation import calibrate, draw_sample, stream
from balance_att.solver import PenaltyPlan, kkt_residual
from conftest import fd_max_rel_error, make_dataset


def intercept_only(n1, n0):
    d = np.r_[np.ones(n1), np.zeros(n0)]
    return Dataset(np.arange(n1 + n0, dtype=float), d, np.ones((n1 + n0, 1)), ("(intercept)",), 0)


def exempt(ds):
    ex = np.zeros(ds.p, bool)
    ex[0] = True
    return ex


def test_loss_at_zero(ds_small):
    value, grad = balancing_loss(np.zeros(ds_small.p), ds_small)
    assert value == pytest.approx(ds_small.n0 / ds_small.n)
    assert grad[0] == pytest.approx((ds_small.n0 - ds_small.n1) / ds_small.n)


def test_gradient_finite_differences():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 3))
    ds = Dataset(rng.normal(size=5), np.array([1, 0, 0, 1, 0.0]), X)
    loss = balancing_objective(ds)
    for _ in range(5):
        assert fd_max_rel_error(loss, rng.normal(size=3) * 0.5) <= 1e-6


@pytest.mark.parametrize("fit", ["lowdim", "penalized"])
def test_intercept_only_log_odds(fit):
    ds = intercept_only(30, 70)
    if fit == "lowdim":
        res = fit_balancing_lowdim(ds)
    else:
        res = fit_balancing_penalized(ds, PenaltyPlan(0.3, [1.0], [True]), init=[0.0])
    assert res.converged
    assert res.coef[0] == pytest.approx(np.log(30 / 70), abs=1e-10 if fit == "lowdim" else 1e-7)
    assert initial_beta(ds)[0] == pytest.approx(-0.84730, abs=1e-5)


def test_balanced_groups_give_zero():
    res = fit_balancing_lowdim(intercept_only(40, 40))
    assert res.coef[0] == pytest.approx(0.0, abs=1e-12)


def test_lowdim_balancing_identity_and_positivity():
    ds = make_dataset(n=500, p=4, seed=2)
    res = fit_balancing_lowdim(ds)
    assert res.converged
    w = control_weights(ds, res.coef)
    assert np.all(w > 0)
    a = ds.d.copy()
    a[~ds.treated] = -w
    assert np.max(np.abs(a @ ds.X / ds.n)) <= 1e-10
    assert w.sum() == pytest.approx(ds.n1, abs=ds.n * 1e-10)


def test_penalized_weight_normalization():
    ds = make_dataset(n=500, p=20, seed=4)
    plan, res = iterate_beta_loadings(ds)
    assert res.converged
    assert control_weights(ds, res.coef).sum() == pytest.approx(ds.n1, abs=ds.n * 1e-7)


def test_huge_lambda_gives_intercept_only():
    ds = make_dataset(n=300, p=6, seed=7)
    res = fit_balancing_penalized(ds, PenaltyPlan(1e3, np.ones(ds.p), exempt(ds)))
    assert res.converged
    np.testing.assert_array_equal(res.coef[1:], 0.0)
    assert res.coef[0] == pytest.approx(np.log(ds.n1 / ds.n0), abs=1e-7)


def test_zero_lambda_matches_lowdim():
    ds = make_dataset(n=400, p=4, seed=8)
    a = fit_balancing_lowdim(ds).coef
    b = fit_balancing_penalized(ds, PenaltyPlan(0.0, np.ones(ds.p), exempt(ds)), tol=1e-10).coef
    np.testing.assert_allclose(b, a, atol=1e-6)


def test_overflow_guard():
    ds = make_dataset(n=50, p=2, seed=1)
    with pytest.raises(OverflowGuardError):
        balancing_loss(np.array([800.0, 0.0, 0.0]), ds)


def test_loading_worked_example():
    # D = (1, 0, 0), X_j = (1, 2, 0), control weights equal to one
    X = np.column_stack([np.ones(3), [1.0, 2.0, 0.0]])
    ds = Dataset(np.zeros(3), np.array([1.0, 0.0, 0.0]), X, ("(intercept)", "x"), 0)
    psi = beta_loadings(ds, np.zeros(2))
    assert psi[1] == pytest.approx(np.sqrt(5 / 3))
    assert psi[1] == pytest.approx(1.29099, abs=1e-5)


def test_loading_intercept_zero_column_and_scaling():
    ds = make_dataset(n=200, p=3, seed=9)
    X = ds.X.copy()
    X[:, 2] = 0.0
    X[:, 3] *= 3.0
    ds2 = Dataset(ds.y, ds.d, X, ds.col_names, 0)
    beta = np.array([0.1, 0.2, 0.0, 0.05])
    r = -ds.d.copy()
    r[~ds.treated] = control_weights(ds2, beta)
    psi2 = beta_loadings(ds2, beta)
    assert psi2[0] == pytest.approx(np.sqrt(np.mean(r * r)))
    assert psi2[2] == 0.0
    b1 = beta.copy()
    b1[3] *= 3.0
    assert psi2[3] == pytest.approx(3.0 * beta_loadings(ds, b1)[3])


def test_lambda_level_oracle():
    oracle = 1.1 * NormalDist().inv_cdf(1 - 0.05 / 20) / np.sqrt(100)
    assert lambda_level(100, 10) == pytest.approx(oracle, abs=1e-12)
    assert lambda_level(100, 10) == pytest.approx(0.308773, abs=1e-5)
    assert lambda_level(100, 10, prime=True) == pytest.approx(0.617547, abs=1e-5)
    assert lambda_level(400, 10) == pytest.approx(lambda_level(100, 10) / 2)
    with pytest.raises(ValueError):
        lambda_level(100, 10, c=1.0)


def test_loading_iteration_constant_covariate_stops_at_once():
    n = 60
    d = np.r_[np.ones(20), np.zeros(40)]
    X = np.column_stack([np.ones(n), np.full(n, 2.0)])
    ds = Dataset(np.zeros(n), d, X, ("(intercept)", "k"), 0)
    plan, res = iterate_beta_loadings(ds)
    assert len(res.loading_trace) == 2
    assert res.coef[1] == 0.0
    assert res.coef[0] == pytest.approx(np.log(20 / 40), abs=1e-7)


def test_loading_iteration_eps_inf_single_refit():
    ds = make_dataset(n=300, p=8, seed=10)
    plan, res = iterate_beta_loadings(ds, eps=np.inf)
    assert len(res.loading_trace) == 2


def test_loading_iteration_requires_intercept():
    with pytest.raises(ValueError):
        iterate_beta_loadings(make_dataset(n=50, p=2, intercept=False))


def test_logit_intercept_only_and_gradient():
    ds = intercept_only(25, 75)
    res = logit_lasso_fit(ds, PenaltyPlan(0.2, [1.0], [True]), init=[0.0])
    assert res.coef[0] == pytest.approx(np.log(25 / 75), abs=1e-6)
    big = make_dataset(n=200, p=5, seed=11)
    huge = logit_lasso_fit(big, PenaltyPlan(1e3, np.ones(big.p), exempt(big)))
    np.testing.assert_array_equal(huge.coef[1:], 0.0)
    rng = np.random.default_rng(1)
    assert fd_max_rel_error(logit_objective(big), rng.normal(size=big.p) * 0.3) <= 1e-6


def test_dgp_selection_and_termination():
    spec = calibrate(50)
    concentrated, stopped = 0, 0
    reps = 20
    for r in range(reps):
        ds = draw_sample(spec, 1000, stream(123, 1000, 50, r))
        plan, res = iterate_beta_loadings(ds)
        assert kkt_residual(balancing_objective(ds), plan, res.coef) <= 1e-7 or not res.converged
        act = [j for j in res.active_set if j != 0]
        if act and np.mean(np.array(act) <= 10) > 0.5:
            concentrated += 1
        stopped += len(res.loading_trace) - 1 < 15
    assert concentrated > reps / 2
    assert stopped >= 0.9 * reps
