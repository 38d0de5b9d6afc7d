"""ATT point estimates, variance estimates and comparator estimators."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .balancing import (
    EXP_LINK,
    LinkSpec,
    control_weights,
    fit_balancing_lowdim,
    iterate_beta_loadings,
    iterate_logit_loadings,
    lambda_level,
)
from .data_model import Dataset
from .immunization import (
    SingularDesignError,
    fit_mu_lowdim,
    immunization_weights,
    iterate_mu_loadings,
    iterate_wls_loadings,
)
from .solver import DEFAULT_MAX_ITER, DEFAULT_TOL, SolverError

log = logging.getLogger(__name__)

ESTIMATORS = ("naive", "immunized", "farrell", "double_selection", "ols", "lowdim")


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Tuning:
    """Penalty and solver settings shared by the penalized estimators."""

    gamma: float = 0.05
    c: float = 1.1
    eps: float = 1e-4
    k0: int = 15
    mu_k0: int = 2
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER


@dataclass
class AttEstimate:
    theta: float
    sigma: float
    se: float
    ci_low: float
    ci_high: float
    alpha: float
    n: int
    n1: int
    method: str
    weights: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, include_weights: bool = False) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "weights"}
        if include_weights and self.weights is not None:
            out["weights"] = [float(v) for v in self.weights]
        elif self.weights is not None:
            w = self.weights
            out["weight_summary"] = {
                "sum": float(w.sum()), "min": float(w.min()), "max": float(w.max()),
            }
        return out

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high


def normal_quantile(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return float(ndtri(1.0 - alpha / 2.0))


def _estimate(theta, sigma, ds, alpha, method, weights=None, **diag) -> AttEstimate:
    se = sigma / np.sqrt(ds.n)
    half = normal_quantile(alpha) * se
    return AttEstimate(
        float(theta), float(sigma), float(se), float(theta - half), float(theta + half),
        alpha, ds.n, ds.n1, method, weights, diag,
    )


def _moment_estimate(ds: Dataset, w_ctrl, mu, theta=None):
    """Return ``(theta, g)`` for the ATT moment with control weights ``w_ctrl``.

    ``g_i = [D_i - (1 - D_i) w_i] (Y_i - X_i'mu) - D_i theta``. When ``theta``
    is None it solves ``mean(g) = 0``.
    """
    a = ds.d.copy()
    a[~ds.treated] = -w_ctrl
    resid = ds.y - ds.X @ mu
    m = a * resid
    if theta is None:
        theta = m.sum() / ds.d.sum()
    return float(theta), m - ds.d * theta


def _sigma(g, ds):
    return float(np.sqrt(np.mean(g * g)) / ds.d.mean())


def att_immunized(ds: Dataset, beta_hat, mu_hat, link: LinkSpec = EXP_LINK, alpha=0.05,
                  method="immunized", **diag) -> AttEstimate:
    w = control_weights(ds, beta_hat, link)
    if not np.all(np.isfinite(w)):
        raise EstimationError("non-finite balancing weights")
    theta, g = _moment_estimate(ds, w, np.asarray(mu_hat, dtype=float))
    return _estimate(theta, _sigma(g, ds), ds, alpha, method, w, **diag)


def att_naive(ds: Dataset, beta_hat, link: LinkSpec = EXP_LINK, alpha=0.05, **diag) -> AttEstimate:
    """Plug-in estimate with ``mu = 0``; variance computed as in low dimension with ``mu = 0``."""
    return att_immunized(ds, beta_hat, np.zeros(ds.p), link, alpha, method="naive", **diag)


def correction_term(ds: Dataset, beta_hat, link: LinkSpec = EXP_LINK) -> np.ndarray:
    """Treated covariate mean minus the weighted control mean, both over ``n1``."""
    w = control_weights(ds, beta_hat, link)
    return (ds.X[ds.treated].sum(axis=0) - w @ ds.X[~ds.treated]) / ds.n1


def att_lowdim(ds: Dataset, link: LinkSpec = EXP_LINK, alpha=0.05, method="lowdim") -> AttEstimate:
    """Two-step GMM estimate; the variance uses the weighted control regression ``mu``."""
    fit = fit_balancing_lowdim(ds, link)
    if not fit.converged:
        raise EstimationError(f"low-dimensional balancing fit failed: {fit.message}")
    w = control_weights(ds, fit.coef, link)
    theta, _ = _moment_estimate(ds, w, np.zeros(ds.p))
    mu = fit_mu_lowdim(ds, fit.coef, link).coef
    _, g = _moment_estimate(ds, w, mu, theta)
    return _estimate(theta, _sigma(g, ds), ds, alpha, method, w,
                     beta=fit.coef.tolist(), beta_kkt=fit.kkt_residual)


def _nnz(coef, ds):
    return int(sum(1 for j in np.flatnonzero(coef) if j != ds.intercept_index))


class BalancingCache:
    """Memoizes the balancing-step fit so naive and immunized estimates share it."""

    def __init__(self, ds: Dataset, link: LinkSpec, tuning: Tuning):
        self.ds, self.link, self.tuning = ds, link, tuning
        self._fit = None

    def get(self):
        if self._fit is None:
            t = self.tuning
            self._fit = iterate_beta_loadings(
                self.ds, self.link, t.gamma, t.c, t.eps, t.k0, t.tol, t.max_iter
            )
        return self._fit


def _balancing(ds, link, tuning, cache):
    cache = cache or BalancingCache(ds, link, tuning)
    plan, fit = cache.get()
    if not fit.converged:
        log.warning("balancing fit did not reach tolerance: %s", fit.message)
    return plan, fit


def estimate_naive(ds, link=EXP_LINK, alpha=0.05, tuning=Tuning(), cache=None) -> AttEstimate:
    plan, fit = _balancing(ds, link, tuning, cache)
    return att_naive(
        ds, fit.coef, link, alpha, lam=plan.lam, beta_active=_nnz(fit.coef, ds),
        beta_kkt=fit.kkt_residual, beta_converged=fit.converged,
        beta_loading_iterations=len(fit.loading_trace) - 1,
        beta=fit.coef.tolist(),
    )


def estimate_immunized(ds, link=EXP_LINK, alpha=0.05, tuning=Tuning(), cache=None) -> AttEstimate:
    """Balancing step, immunization step, then the immunized ATT."""
    plan, fit = _balancing(ds, link, tuning, cache)
    t = tuning
    mplan, mfit = iterate_mu_loadings(ds, fit.coef, link, t.gamma, t.c, t.eps, t.mu_k0, t.tol, t.max_iter)
    return att_immunized(
        ds, fit.coef, mfit.coef, link, alpha,
        lam=plan.lam, lam_prime=mplan.lam,
        beta_active=_nnz(fit.coef, ds), mu_active=_nnz(mfit.coef, ds),
        beta_kkt=fit.kkt_residual, mu_kkt=mfit.kkt_residual,
        beta_converged=fit.converged, mu_converged=mfit.converged,
        beta_loading_iterations=len(fit.loading_trace) - 1,
        beta=fit.coef.tolist(), mu=mfit.coef.tolist(),
    )


def att_farrell(ds, link=EXP_LINK, alpha=0.05, tuning=Tuning()) -> AttEstimate:
    """Same ATT formula with a logistic-Lasso propensity and an unweighted control Lasso."""
    t = tuning
    plan, bfit = iterate_logit_loadings(ds, t.gamma, t.c, t.eps, t.k0, t.tol, t.max_iter)
    # beta = 0 under the exp link gives unit weights on every control
    w = immunization_weights(ds, np.zeros(ds.p), EXP_LINK)
    mplan, mfit = iterate_wls_loadings(
        ds.X, ds.y, w, ds.intercept_index, t.gamma, t.c, t.eps, t.mu_k0, t.tol, t.max_iter,
        what="control outcome",
    )
    return att_immunized(
        ds, bfit.coef, mfit.coef, link, alpha, method="farrell",
        lam=plan.lam, lam_prime=mplan.lam,
        beta_active=_nnz(bfit.coef, ds), mu_active=_nnz(mfit.coef, ds),
        beta_kkt=bfit.kkt_residual, mu_kkt=mfit.kkt_residual,
        beta_converged=bfit.converged, mu_converged=mfit.converged,
        beta=bfit.coef.tolist(), mu=mfit.coef.tolist(),
    )


def _independent_columns(Z, rtol=1e-9):
    """Indices of columns kept when aliased ones are dropped in column order."""
    Q = np.empty((Z.shape[0], 0))
    keep = []
    for j in range(Z.shape[1]):
        z = Z[:, j]
        r = z - Q @ (Q.T @ z)
        r = r - Q @ (Q.T @ r)
        nr = np.linalg.norm(r)
        if nr > rtol * max(np.linalg.norm(z), 1e-300):
            keep.append(j)
            Q = np.column_stack([Q, r / nr])
    return keep


def _ols_robust(Z, y, col=1):
    """OLS coefficient ``col`` with an HC1 heteroskedasticity-robust standard error.

    Columns that are linear combinations of earlier ones are dropped first;
    column ``col`` itself must survive. Returns ``(coef, se, n_dropped)``.
    """
    keep = _independent_columns(Z)
    if col not in keep:
        raise SingularDesignError("treatment column is collinear with the covariates")
    pos = keep.index(col)
    dropped = Z.shape[1] - len(keep)
    Z = Z[:, keep]
    n, k = Z.shape
    if n <= k:
        raise SingularDesignError(f"OLS needs n > k, got n={n}, k={k}")
    coef, _, rank, _ = np.linalg.lstsq(Z, y, rcond=None)
    if rank < k:
        raise SingularDesignError(f"OLS design is rank deficient: rank {rank} < {k}")
    resid = y - Z @ coef
    bread = np.linalg.inv(Z.T @ Z)
    meat = (Z * (resid * resid)[:, None]).T @ Z
    cov = bread @ meat @ bread * n / (n - k)
    return float(coef[pos]), float(np.sqrt(cov[pos, pos])), dropped


def _design_with_d(ds: Dataset, cols):
    cols = [j for j in cols if j != ds.intercept_index]
    return np.column_stack([np.ones(ds.n), ds.d, ds.X[:, cols]]), cols


def att_ols(ds: Dataset, alpha=0.05) -> AttEstimate:
    """Coefficient on D in a least-squares fit of Y on (1, D, X)."""
    Z, cols = _design_with_d(ds, range(ds.p))
    theta, se, dropped = _ols_robust(Z, ds.y)
    return _estimate(theta, se * np.sqrt(ds.n), ds, alpha, "ols", outcome_columns=len(cols),
                     aliased_dropped=dropped)


def att_double_selection(ds: Dataset, alpha=0.05, tuning=Tuning(), lambda_scale: float = 1.0) -> AttEstimate:
    """Post-double-selection OLS.

    Lasso of Y on X and of D on X (full sample, squared loss, iterated
    heteroskedastic loadings); then OLS of Y on D and the union of selected
    columns. ``lambda_scale`` multiplies both penalty levels.
    """
    t = tuning
    ones = np.ones(ds.n)
    lam = lambda_scale * lambda_level(ds.n, ds.p, t.gamma, t.c, prime=True)
    _, yfit = iterate_wls_loadings(ds.X, ds.y, ones, ds.intercept_index, t.gamma, t.c, t.eps,
                                   t.k0, t.tol, t.max_iter, lam=lam, what="outcome selection")
    _, dfit = iterate_wls_loadings(ds.X, ds.d, ones, ds.intercept_index, t.gamma, t.c, t.eps,
                                   t.k0, t.tol, t.max_iter, lam=lam, what="treatment selection")
    ysel = [j for j in yfit.active_set if j != ds.intercept_index]
    dsel = [j for j in dfit.active_set if j != ds.intercept_index]
    union = sorted(set(ysel) | set(dsel))
    Z, _ = _design_with_d(ds, union)
    if ds.n <= Z.shape[1]:
        raise EstimationError(f"union support of size {len(union)} too large for OLS with n={ds.n}")
    theta, se, dropped = _ols_robust(Z, ds.y)
    return _estimate(
        theta, se * np.sqrt(ds.n), ds, alpha, "double_selection", aliased_dropped=dropped,
        outcome_selected=len(ysel), treatment_selected=len(dsel), union=len(union),
        selected_columns=[ds.col_names[j] for j in union],
    )


def estimate(ds: Dataset, estimators: Sequence[str], link=EXP_LINK, alpha=0.05,
             tuning=Tuning(), oracle_columns=None) -> dict:
    """Run several estimators on one dataset, sharing the balancing fit.

    Returns ``{name: AttEstimate or Exception}``; failures are captured
    rather than raised so callers can report them.
    """
    cache = BalancingCache(ds, link, tuning)
    out = {}
    for name in estimators:
        try:
            if name == "naive":
                out[name] = estimate_naive(ds, link, alpha, tuning, cache)
            elif name == "immunized":
                out[name] = estimate_immunized(ds, link, alpha, tuning, cache)
            elif name == "farrell":
                out[name] = att_farrell(ds, link, alpha, tuning)
            elif name == "double_selection":
                out[name] = att_double_selection(ds, alpha, tuning)
            elif name == "ols":
                out[name] = att_ols(ds, alpha)
            elif name == "lowdim":
                out[name] = att_lowdim(ds, link, alpha)
            elif name == "oracle":
                if oracle_columns is None:
                    raise EstimationError("oracle estimator needs the true propensity covariates")
                out[name] = att_lowdim(ds.select(oracle_columns), link, alpha, method="oracle")
            else:
                raise ValueError(f"unknown estimator {name!r}")
        except (SolverError, EstimationError, SingularDesignError, ArithmeticError) as exc:
            out[name] = exc
    return out


@dataclass
class SeriesPoint:
    period: str
    estimate: Optional[AttEstimate]
    counterfactual_level: float
    treated_mean: float
    error: Optional[str] = None


def counterfactual_series(
    ds_base: Dataset,
    outcomes: Mapping[str, np.ndarray],
    link: LinkSpec = EXP_LINK,
    tuning: Tuning = Tuning(),
    alpha: float = 0.05,
) -> list:
    """Immunized ATT for each outcome period with a single balancing fit.

    ``outcomes`` maps period labels to outcome vectors, one entry per unit in
    ``ds_base`` row order. A failing period is reported with its error and
    does not stop the others.
    """
    for name, col in outcomes.items():
        if np.shape(col) != (ds_base.n,):
            raise ValueError(f"outcome column {name!r} has length {np.size(col)}, expected {ds_base.n}")
    if ds_base.n1 == 1:
        warnings.warn(
            "only one treated unit: standard errors rest on a single treated residual",
            stacklevel=2,
        )
    t = tuning
    plan, fit = iterate_beta_loadings(ds_base, link, t.gamma, t.c, t.eps, t.k0, t.tol, t.max_iter)
    out = []
    for name, col in outcomes.items():
        ds = ds_base.with_outcome(col)
        treated_mean = float(ds.y[ds.treated].mean())
        try:
            mplan, mfit = iterate_mu_loadings(ds, fit.coef, link, t.gamma, t.c, t.eps, t.mu_k0,
                                              t.tol, t.max_iter)
            est = att_immunized(ds, fit.coef, mfit.coef, link, alpha,
                                lam=plan.lam, lam_prime=mplan.lam,
                                beta_active=_nnz(fit.coef, ds), mu_active=_nnz(mfit.coef, ds))
            out.append(SeriesPoint(name, est, treated_mean - est.theta, treated_mean))
        except (SolverError, EstimationError, ArithmeticError) as exc:
            out.append(SeriesPoint(name, None, float("nan"), treated_mean, str(exc)))
    return out
