"""Balancing step: estimate beta so that control weights h(X'beta) balance covariates.

The loss ``M(b) = mean[(1 - D) H(X'b) - D X'b]`` is strictly convex; its
stationarity conditions are the empirical balancing equations
``mean[(D - (1 - D) h(X'b)) X] = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, ndtri

from .data_model import Dataset
from .solver import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    FitResult,
    LossDomainError,
    PenaltyPlan,
    SolverError,
    minimize_composite,
)

EXP_BOUND = 700.0


class OverflowGuardError(LossDomainError):
    def __init__(self, magnitude: float, bound: float):
        super().__init__(f"index magnitude {magnitude:.4g} exceeds overflow guard {bound:g}")
        self.magnitude = magnitude
        self.bound = bound


@dataclass(frozen=True)
class LinkSpec:
    """Weight function ``h`` with its primitive ``H`` and two derivatives.

    ``h`` is the odds of the propensity model ``G = h / (1 + h)``.
    """

    name: str
    H: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    h_prime: Callable[[np.ndarray], np.ndarray]
    h_second: Callable[[np.ndarray], np.ndarray]
    bound: float = EXP_BOUND

    def guard(self, u: np.ndarray) -> None:
        if u.size:
            m = float(np.max(np.abs(u)))
            if not m <= self.bound:
                raise OverflowGuardError(m, self.bound)

    def G(self, u):
        hu = self.h(u)
        return hu / (1.0 + hu)


EXP_LINK = LinkSpec("exp", np.exp, np.exp, np.exp, np.exp)

LINKS = {"exp": EXP_LINK}


def get_link(name: str) -> LinkSpec:
    try:
        return LINKS[name]
    except KeyError:
        raise ValueError(f"unknown link {name!r}; available: {sorted(LINKS)}") from None


def lambda_level(n: int, p: int, gamma: float = 0.05, c: float = 1.1, prime: bool = False) -> float:
    """Overall penalty ``c * Phi^{-1}(1 - gamma / 2p) / sqrt(n)``; doubled when ``prime``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if c <= 1:
        raise ValueError("c must exceed 1")
    if not 0 < gamma < 2 * p:
        raise ValueError(f"gamma/2p must lie in (0, 1), got gamma={gamma}, p={p}")
    lam = c * ndtri(1.0 - gamma / (2.0 * p)) / np.sqrt(n)
    return float(2.0 * lam if prime else lam)


def _exempt_mask(ds: Dataset) -> np.ndarray:
    ex = np.zeros(ds.p, bool)
    if ds.intercept_index is not None:
        ex[ds.intercept_index] = True
    return ex


def initial_beta(ds: Dataset) -> np.ndarray:
    """Intercept at ``log(n1 / n0)``, zeros elsewhere."""
    b = np.zeros(ds.p)
    if ds.intercept_index is not None:
        b[ds.intercept_index] = np.log(ds.n1 / ds.n0)
    return b


def balancing_objective(ds: Dataset, link: LinkSpec = EXP_LINK):
    """Return a ``beta -> (value, gradient)`` callback for the balancing loss."""
    n = ds.n
    Xc = np.ascontiguousarray(ds.X[~ds.treated])
    xbar1 = ds.X[ds.treated].sum(axis=0) / n

    def loss(beta):
        u = Xc @ beta
        link.guard(u)
        value = link.H(u).sum() / n - xbar1 @ beta
        grad = Xc.T @ link.h(u) / n - xbar1
        return float(value), grad

    return loss


def balancing_loss(beta, ds: Dataset, link: LinkSpec = EXP_LINK):
    """``(value, gradient)`` of the balancing loss at ``beta``."""
    return balancing_objective(ds, link)(np.asarray(beta, dtype=float))


def control_weights(ds: Dataset, beta, link: LinkSpec = EXP_LINK) -> np.ndarray:
    """``h(X_i'beta)`` for every control unit, in row order."""
    u = ds.X[~ds.treated] @ np.asarray(beta, dtype=float)
    link.guard(u)
    return link.h(u)


def balancing_residual(ds: Dataset, beta, link: LinkSpec = EXP_LINK) -> np.ndarray:
    """Per-unit ``(1 - D_i) h(X_i'beta) - D_i``."""
    r = -ds.d.copy()
    r[~ds.treated] = control_weights(ds, beta, link)
    return r


def beta_loadings(ds: Dataset, beta, link: LinkSpec = EXP_LINK) -> np.ndarray:
    r = balancing_residual(ds, beta, link)
    return np.sqrt((r * r) @ (ds.X * ds.X) / ds.n)


def fit_balancing_lowdim(
    ds: Dataset, link: LinkSpec = EXP_LINK, tol: float = 1e-10, max_iter: int = 100
) -> FitResult:
    """Unpenalized balancing fit by damped Newton iterations.

    Returns ``converged=False`` when the objective appears unbounded below,
    which happens when no positive control weights can reproduce the treated
    covariate means.
    """
    loss = balancing_objective(ds, link)
    Xc = ds.X[~ds.treated]
    beta = initial_beta(ds)
    f, g = loss(beta)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g), initial=0.0) <= tol:
            return FitResult(beta, f, float(np.max(np.abs(g), initial=0.0)), it - 1, True)
        u = Xc @ beta
        Hess = (Xc * link.h_prime(u)[:, None]).T @ Xc / ds.n
        try:
            step = -np.linalg.solve(Hess, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(Hess, g, rcond=None)[0]
        slope = g @ step
        t = 1.0
        while True:
            cand = beta + t * step
            try:
                fc, gc = loss(cand)
            except LossDomainError:
                fc = np.inf
            if np.isfinite(fc) and fc <= f + 1e-4 * t * slope + 1e-14 * abs(f):
                break
            t *= 0.5
            if t < 1e-12:
                return FitResult(
                    beta, f, float(np.max(np.abs(g))), it, False,
                    "line search failed; balancing program may be unbounded below",
                )
        beta, f, g = cand, fc, gc
    res = float(np.max(np.abs(g), initial=0.0))
    return FitResult(
        beta, f, res, max_iter, res <= tol,
        "" if res <= tol else "no convergence; objective may be unbounded below (separation)",
    )


def fit_balancing_penalized(
    ds: Dataset,
    plan: PenaltyPlan,
    link: LinkSpec = EXP_LINK,
    init=None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> FitResult:
    if plan.p != ds.p:
        raise ValueError(f"plan has {plan.p} loadings for {ds.p} covariates")
    init = initial_beta(ds) if init is None else init
    return minimize_composite(balancing_objective(ds, link), plan, init, tol=tol, max_iter=max_iter)


def iterate_loadings(fit, loadings, init, lam, exempt, gamma, c, eps, k0, what="balancing"):
    """Alternate loading updates and penalized refits until the loadings settle.

    ``loadings(coef)`` computes loadings at a coefficient vector and
    ``fit(plan, init)`` refits; each refit is warm-started at the previous
    solution. Stops when the sup-norm change in loadings is at most ``eps`` or
    after ``k0`` refits.
    """
    coef = np.asarray(init, dtype=float)
    psi = loadings(coef)
    trace = [psi]
    k = 0
    while True:
        k += 1
        plan = PenaltyPlan(lam, psi, exempt, c=c, gamma=gamma)
        try:
            res = fit(plan, coef)
        except SolverError as exc:
            raise SolverError(f"{what} fit failed at loading iteration {k}: {exc}") from exc
        coef = res.coef
        psi_new = loadings(coef)
        trace.append(psi_new)
        change = float(np.max(np.abs(psi_new - psi), initial=0.0))
        if change <= eps or k >= k0:
            break
        psi = psi_new
    res.loading_trace = trace
    res.message = (res.message + f"; {k} loading iterations").lstrip("; ")
    return plan, res


def iterate_beta_loadings(
    ds: Dataset,
    link: LinkSpec = EXP_LINK,
    gamma: float = 0.05,
    c: float = 1.1,
    eps: float = 1e-4,
    k0: int = 15,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
):
    """Data-driven penalty loadings for the balancing step, with the final fit.

    Starts from the intercept-only point ``log(n1/n0)`` and returns
    ``(plan, fit)``. ``fit.loading_trace`` lists the loading vectors visited.
    """
    if ds.intercept_index is None:
        raise ValueError("loading iteration needs a dataset with an intercept column")
    lam = lambda_level(ds.n, ds.p, gamma, c)
    loss = balancing_objective(ds, link)
    return iterate_loadings(
        lambda plan, b: minimize_composite(loss, plan, b, tol=tol, max_iter=max_iter),
        lambda b: beta_loadings(ds, b, link),
        initial_beta(ds),
        lam,
        _exempt_mask(ds),
        gamma,
        c,
        eps,
        k0,
    )


# -- logistic Lasso (comparator first stage) ---------------------------------


def logit_objective(ds: Dataset):
    n = ds.n
    X, d = ds.X, ds.d

    def loss(beta):
        u = X @ beta
        value = (np.logaddexp(0.0, u).sum() - d @ u) / n
        grad = X.T @ (expit(u) - d) / n
        return float(value), grad

    return loss


def logit_loadings(ds: Dataset, beta) -> np.ndarray:
    r = ds.d - expit(ds.X @ np.asarray(beta, dtype=float))
    return np.sqrt((r * r) @ (ds.X * ds.X) / ds.n)


def logit_lasso_fit(
    ds: Dataset, plan: PenaltyPlan, init=None, tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> FitResult:
    """l1-penalized logistic regression of D on X."""
    if plan.p != ds.p:
        raise ValueError(f"plan has {plan.p} loadings for {ds.p} covariates")
    init = initial_beta(ds) if init is None else init
    return minimize_composite(logit_objective(ds), plan, init, tol=tol, max_iter=max_iter)


def iterate_logit_loadings(
    ds: Dataset,
    gamma: float = 0.05,
    c: float = 1.1,
    eps: float = 1e-4,
    k0: int = 15,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
):
    if ds.intercept_index is None:
        raise ValueError("loading iteration needs a dataset with an intercept column")
    loss = logit_objective(ds)
    return iterate_loadings(
        lambda plan, b: minimize_composite(loss, plan, b, tol=tol, max_iter=max_iter),
        lambda b: logit_loadings(ds, b),
        initial_beta(ds),
        lambda_level(ds.n, ds.p, gamma, c),
        _exempt_mask(ds),
        gamma,
        c,
        eps,
        k0,
        what="logit",
    )
