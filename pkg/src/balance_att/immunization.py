"""Immunization step: weighted least squares of Y on X over the controls.

Control unit ``i`` gets weight ``h'(X_i'beta_hat)``; treated units get zero.
The resulting ``mu`` removes the first-order sensitivity of the ATT moment to
errors in ``beta_hat``.
"""

from __future__ import annotations

import numpy as np

from .balancing import EXP_LINK, LinkSpec, iterate_loadings, lambda_level
from .data_model import Dataset
from .solver import DEFAULT_MAX_ITER, DEFAULT_TOL, FitResult, PenaltyPlan, minimize_composite


class SingularDesignError(np.linalg.LinAlgError):
    pass


def immunization_weights(ds: Dataset, beta_hat, link: LinkSpec = EXP_LINK) -> np.ndarray:
    """Per-unit ``(1 - D_i) h'(X_i'beta_hat)``."""
    w = np.zeros(ds.n)
    ctrl = ~ds.treated
    u = ds.X[ctrl] @ np.asarray(beta_hat, dtype=float)
    link.guard(u)
    w[ctrl] = link.h_prime(u)
    return w


def wls_objective(X, y, w, n=None):
    """``mu -> (mean w (y - X mu)^2, gradient)``, averaging over ``n`` units.

    Rows with zero weight are dropped up front; ``n`` defaults to ``len(y)``.
    """
    n = len(y) if n is None else n
    keep = w > 0
    Xk = np.ascontiguousarray(X[keep])
    yk, wk = y[keep], w[keep]

    def loss(mu):
        r = yk - Xk @ mu
        wr = wk * r
        return float(wr @ r / n), -2.0 * (Xk.T @ wr) / n

    return loss


def wls_loadings(X, y, w, mu, n=None) -> np.ndarray:
    """``sqrt(mean(w^2 (y - X mu)^2 X_j^2))`` for each column ``j``."""
    n = len(y) if n is None else n
    r = w * (y - X @ mu)
    return np.sqrt((r * r) @ (X * X) / n)


def weighted_mean_init(X, y, w, intercept_index):
    mu = np.zeros(X.shape[1])
    if intercept_index is not None and w.sum() > 0:
        mu[intercept_index] = (w @ y) / w.sum()
    return mu


def weighted_ls_loss(mu, ds: Dataset, beta_hat, link: LinkSpec = EXP_LINK):
    w = immunization_weights(ds, beta_hat, link)
    return wls_objective(ds.X, ds.y, w)(np.asarray(mu, dtype=float))


def mu_loadings(ds: Dataset, beta_hat, mu, link: LinkSpec = EXP_LINK) -> np.ndarray:
    w = immunization_weights(ds, beta_hat, link)
    return wls_loadings(ds.X, ds.y, w, np.asarray(mu, dtype=float))


def fit_mu_lowdim(ds: Dataset, beta_hat, link: LinkSpec = EXP_LINK) -> FitResult:
    """Closed-form weighted regression of Y on X among the controls."""
    w = immunization_weights(ds, beta_hat, link)
    keep = w > 0
    sw = np.sqrt(w[keep])
    A = ds.X[keep] * sw[:, None]
    b = ds.y[keep] * sw
    mu, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
    if rank < ds.p:
        raise SingularDesignError(
            f"weighted control Gram matrix is singular: rank {rank} < p = {ds.p}"
        )
    loss = wls_objective(ds.X, ds.y, w)
    value, grad = loss(mu)
    return FitResult(mu, value, float(np.max(np.abs(grad), initial=0.0)), 1, True)


def fit_mu_penalized(
    ds: Dataset,
    beta_hat,
    plan: PenaltyPlan,
    link: LinkSpec = EXP_LINK,
    init=None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> FitResult:
    if plan.p != ds.p:
        raise ValueError(f"plan has {plan.p} loadings for {ds.p} covariates")
    w = immunization_weights(ds, beta_hat, link)
    if init is None:
        init = weighted_mean_init(ds.X, ds.y, w, ds.intercept_index)
    return minimize_composite(wls_objective(ds.X, ds.y, w), plan, init, tol=tol, max_iter=max_iter)


def iterate_wls_loadings(
    X, y, w, intercept_index, gamma=0.05, c=1.1, eps=1e-4, k0=2,
    tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, lam=None, what="immunization",
):
    """Penalized weighted least squares with iterated data-driven loadings.

    Loadings are first evaluated at the weighted mean (intercept-only) fit,
    then refreshed after each refit, at most ``k0`` refits in total.
    """
    n, p = X.shape
    if lam is None:
        lam = lambda_level(n, p, gamma, c, prime=True)
    exempt = np.zeros(p, bool)
    if intercept_index is not None:
        exempt[intercept_index] = True
    loss = wls_objective(X, y, w)
    return iterate_loadings(
        lambda plan, m: minimize_composite(loss, plan, m, tol=tol, max_iter=max_iter),
        lambda m: wls_loadings(X, y, w, m),
        weighted_mean_init(X, y, w, intercept_index),
        lam,
        exempt,
        gamma,
        c,
        eps,
        k0,
        what=what,
    )


def iterate_mu_loadings(
    ds: Dataset, beta_hat, link: LinkSpec = EXP_LINK, gamma=0.05, c=1.1, eps=1e-4, k0=2,
    tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
):
    """Immunization fit with penalty ``lambda'`` and iterated loadings; returns ``(plan, fit)``."""
    w = immunization_weights(ds, beta_hat, link)
    return iterate_wls_loadings(
        ds.X, ds.y, w, ds.intercept_index, gamma, c, eps, k0, tol, max_iter
    )
