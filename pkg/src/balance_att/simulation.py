"""Monte Carlo design: sparse logit treatment, exponential outcome, AR(0.5) covariates.

Covariates are ``N(0, S)`` with ``S_ij = 0.5^|i-j|``; ``P(D=1|X) =
Lambda(X'gamma0)``; ``Y = exp(X'mu0) + D zeta0 X'gamma0 + eps``.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .balancing import EXP_LINK
from .data_model import Dataset, add_intercept
from .estimators import ESTIMATORS, AttEstimate, Tuning, estimate

RHO = 0.5
LATENT_R2 = 0.3
OUTCOME_R2 = 0.8
GH_NODES = 96
DEFAULT_ESTIMATORS = ("naive", "immunized", "farrell", "oracle")
ZETA_CONVENTIONS = ("printed", "intent")


def ar_cov(p: int, rho: float = RHO) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def base_patterns(p: int):
    """Unscaled sign-alternating coefficient patterns ``(g, m)`` (1-based ``j``)."""
    if p < 20:
        raise ValueError(f"p must be at least 20 so the pattern blocks do not overlap, got {p}")
    j = np.arange(1, p + 1)
    sign = np.where(j % 2 == 0, 1.0, -1.0)
    g = np.where(j <= 10, sign / j**2, 0.0)
    m = g.copy()
    tail = j >= p - 9
    m[tail] = -sign[tail] / (p - j[tail] + 1) ** 2
    return g, m


def quad_form(v, rho=RHO) -> float:
    """``v' S v`` for the AR covariance without forming ``S``."""
    # S v is the sum of two one-sided exponential filters
    p = v.size
    fwd = np.empty(p)
    acc = 0.0
    for i in range(p):
        acc = rho * acc + v[i]
        fwd[i] = acc
    bwd = np.empty(p)
    acc = 0.0
    for i in range(p - 1, -1, -1):
        acc = rho * acc + v[i]
        bwd[i] = acc
    return float(v @ (fwd + bwd - v))


@dataclass(frozen=True)
class DgpSpec:
    p: int
    gamma0: np.ndarray
    mu0: np.ndarray
    zeta0: float
    theta0: float
    rho_gamma: float
    rho_mu: float
    zeta_convention: str = "printed"

    @property
    def latent_variance(self) -> float:
        return quad_form(self.gamma0)

    @property
    def propensity_support(self) -> np.ndarray:
        return np.flatnonzero(self.gamma0)


def latent_variance_target(r2: float = LATENT_R2) -> float:
    """Index variance giving latent R^2 ``r2`` against a standard logistic error."""
    return r2 / (1.0 - r2) * math.pi**2 / 3.0


def outcome_index_variance() -> float:
    """``s^2`` with ``Var(exp(N(0, s^2))) = 4``, i.e. R^2 = 0.8 with unit noise."""
    return math.log((1.0 + math.sqrt(17.0)) / 2.0)


def calibrate(p: int, zeta_convention: str = "printed") -> DgpSpec:
    """Scale the coefficient patterns and compute the true ATT.

    ``zeta_convention="printed"`` uses ``zeta0 = sqrt(Var(exp(X'mu0)) / (5
    Var(Y(0))))`` = 0.4; ``"intent"`` makes the treatment-effect variance one
    fifth of ``Var(Y(0))``.
    """
    if zeta_convention not in ZETA_CONVENTIONS:
        raise ValueError(f"zeta_convention must be one of {ZETA_CONVENTIONS}")
    g, m = base_patterns(p)
    v_lat = latent_variance_target()
    s2 = outcome_index_variance()
    rho_g = math.sqrt(v_lat / quad_form(g))
    rho_m = math.sqrt(s2 / quad_form(m))
    var_exp = (math.exp(s2) - 1.0) * math.exp(s2)
    var_y0 = var_exp + 1.0
    if zeta_convention == "printed":
        zeta0 = math.sqrt(var_exp / (5.0 * var_y0))
    else:
        zeta0 = math.sqrt(var_y0 / (5.0 * v_lat))
    spec = DgpSpec(p, rho_g * g, rho_m * m, zeta0, 0.0, rho_g, rho_m, zeta_convention)
    return _replace_theta(spec, true_att(spec))


def _replace_theta(spec: DgpSpec, theta0: float) -> DgpSpec:
    return DgpSpec(spec.p, spec.gamma0, spec.mu0, spec.zeta0, theta0,
                   spec.rho_gamma, spec.rho_mu, spec.zeta_convention)


def _normal_expect(f, mean, var, nodes=GH_NODES):
    """``E f(Z)`` for ``Z ~ N(mean, var)`` by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite.hermgauss(nodes)
    return float(w @ f(mean + math.sqrt(2.0 * var) * x) / math.sqrt(math.pi))


def true_att(spec: DgpSpec, method: str = "quadrature", draws: int = 10**7, seed: int = 0,
             nodes: int = GH_NODES):
    """ATT ``zeta0 E[Z Lambda(Z)] / E[Lambda(Z)]`` with ``Z ~ N(0, gamma0' S gamma0)``.

    ``E[Lambda(Z)] = 1/2`` by symmetry. Quadrature returns a float; Monte
    Carlo returns ``(estimate, standard_error)``.
    """
    v = spec.latent_variance
    if method == "quadrature":
        return 2.0 * spec.zeta0 * _normal_expect(lambda z: z * expit(z), 0.0, v, nodes)
    if method == "monte_carlo":
        if draws < 1000:
            raise ValueError("Monte Carlo true ATT needs at least 1000 draws")
        rng = np.random.Generator(np.random.Philox(seed))
        total, total_sq, done = 0.0, 0.0, 0
        while done < draws:
            k = min(10**6, draws - done)
            z = rng.standard_normal(k) * math.sqrt(v)
            t = 2.0 * spec.zeta0 * z * expit(z)
            total += t.sum()
            total_sq += (t * t).sum()
            done += k
        mean = total / draws
        var = total_sq / draws - mean * mean
        return mean, math.sqrt(var / draws)
    raise ValueError(f"unknown method {method!r}")


def stream(base_seed: int, n: int, p: int, rep: int) -> np.random.Generator:
    """Independent Philox stream keyed by ``(base_seed, n, p, rep)``."""
    ss = np.random.SeedSequence(entropy=int(base_seed) % 2**64, spawn_key=(int(n), int(p), int(rep)))
    return np.random.Generator(np.random.Philox(ss))


def draw_covariates(n: int, p: int, rng: np.random.Generator, rho: float = RHO) -> np.ndarray:
    eps = rng.standard_normal((n, p))
    X = np.empty((n, p))
    X[:, 0] = eps[:, 0]
    scale = math.sqrt(1.0 - rho * rho)
    for j in range(1, p):
        X[:, j] = rho * X[:, j - 1] + scale * eps[:, j]
    return X


def draw_sample(spec: DgpSpec, n: int, rng: np.random.Generator) -> Dataset:
    """One sample of size ``n``; the returned Dataset has an intercept in column 0."""
    if n < 2:
        raise ValueError("n must be >= 2")
    X = draw_covariates(n, spec.p, rng)
    index = X @ spec.gamma0
    d = (rng.random(n) < expit(index)).astype(float)
    y = np.exp(X @ spec.mu0) + d * spec.zeta0 * index + rng.standard_normal(n)
    names = tuple(f"x{j + 1}" for j in range(spec.p))
    return add_intercept(Dataset(y, d, X, names))


# -- population nuisance targets ---------------------------------------------


def _tilted_moments(spec: DgpSpec, f, fp, fpp):
    """``E[f(u) Xt Xt']`` and ``E[f(u) Xt exp(X'mu0)]`` for ``Xt = (1, X)``, ``u = X'gamma0``.

    Uses Gaussian integration by parts, so only one-dimensional quadrature is
    needed.
    """
    S = ar_cov(spec.p)
    g, mu = spec.gamma0, spec.mu0
    Sg, Smu = S @ g, S @ mu
    v = g @ Sg
    e0, e1, e2 = (_normal_expect(fn, 0.0, v) for fn in (f, fp, fpp))
    p = spec.p
    A = np.empty((p + 1, p + 1))
    A[0, 0] = e0
    A[0, 1:] = A[1:, 0] = Sg * e1
    A[1:, 1:] = S * e0 + np.outer(Sg, Sg) * e2
    # exponential tilt: E[f(u) X e^{X'mu}] = e^{mu'S mu/2} E[f(u') X'] with X' ~ N(S mu, S)
    tilt = math.exp(0.5 * (mu @ Smu))
    m_u = g @ Smu
    t0, t1 = (_normal_expect(fn, m_u, v) for fn in (f, fp))
    b = np.empty(p + 1)
    b[0] = tilt * t0
    b[1:] = tilt * (Smu * t0 + Sg * t1)
    return A, b


def _lam(u):
    return expit(u)


def _dlam(u):
    s = expit(u)
    return s * (1 - s)


def _d2lam(u):
    s = expit(u)
    return s * (1 - s) * (1 - 2 * s)


def population_mu(spec: DgpSpec, weighting: str = "balancing") -> np.ndarray:
    """Population coefficient of the control-group regression of Y on (1, X).

    ``"balancing"`` weights controls by ``h'(X'beta0) = exp(X'gamma0)``, which
    turns the control measure into ``Lambda(X'gamma0) dP``; ``"unweighted"``
    is plain least squares on controls, measure ``(1 - Lambda) dP``.
    """
    A1, b1 = _tilted_moments(spec, _lam, _dlam, _d2lam)
    if weighting == "balancing":
        A, b = A1, b1
    elif weighting == "unweighted":
        A0, b0 = _tilted_moments(spec, np.ones_like, np.zeros_like, np.zeros_like)
        A, b = A0 - A1, b0 - b1
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return np.linalg.solve(A, b)


def population_beta(spec: DgpSpec) -> np.ndarray:
    return np.concatenate([[0.0], spec.gamma0])


# -- replication study ---------------------------------------------------------


@dataclass
class StudyRow:
    n: int
    p: int
    estimator: str
    replications: int
    failures: int
    rmse: float
    bias: float
    coverage_rate: float
    mean_se: float
    beta_l1_error: float
    mu_l1_error: float
    theta0: float


@dataclass
class SimulationReport:
    rows: list
    base_seed: int
    replications: int
    zeta_convention: str
    estimates: dict = field(default_factory=dict, repr=False)

    def row(self, n, p, estimator) -> StudyRow:
        for r in self.rows:
            if (r.n, r.p, r.estimator) == (n, p, estimator):
                return r
        raise KeyError((n, p, estimator))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = list(StudyRow.__dataclass_fields__)
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in cols])
        return buf.getvalue()

    def to_table(self) -> str:
        """Plain-text table grouped by ``p``, one column block per ``n``."""
        ns = sorted({r.n for r in self.rows})
        ps = sorted({r.p for r in self.rows})
        ests = list(dict.fromkeys(r.estimator for r in self.rows))
        head = f"{'':<18}" + "".join(f"{'n=' + str(n):^27}" for n in ns)
        sub = f"{'':<18}" + "".join(f"{'RMSE':>9}{'Bias':>9}{'CR':>9}" for _ in ns)
        lines = [head, sub]
        for p in ps:
            lines.append(f"{'p=' + str(p):^{18 + 27 * len(ns)}}")
            for e in ests:
                cells = []
                for n in ns:
                    try:
                        r = self.row(n, p, e)
                        cells.append(f"{r.rmse:9.3f}{r.bias:9.3f}{r.coverage_rate:9.3f}")
                    except KeyError:
                        cells.append(" " * 27)
                lines.append(f"{e:<18}" + "".join(cells))
        lines.append(f"replications={self.replications} seed={self.base_seed} "
                     f"zeta={self.zeta_convention}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _l1(a, b):
    return float(np.abs(np.asarray(a) - np.asarray(b)).sum())


def _one_replication(args):
    spec, n, rep, base_seed, estimators, tuning, targets, alpha = args
    rng = stream(base_seed, n, spec.p, rep)
    ds = draw_sample(spec, n, rng)
    oracle_cols = [0] + [j + 1 for j in spec.propensity_support]
    results = estimate(ds, estimators, EXP_LINK, alpha, tuning, oracle_columns=oracle_cols)
    out = {}
    for name, res in results.items():
        if isinstance(res, AttEstimate):
            diag = res.diagnostics
            b_err = _l1(diag["beta"], targets["beta"]) if "beta" in diag and name != "oracle" else math.nan
            key = "mu_unweighted" if name == "farrell" else "mu_balancing"
            m_err = _l1(diag["mu"], targets[key]) if "mu" in diag else math.nan
            out[name] = (res.theta, res.ci_low, res.ci_high, res.se, b_err, m_err, None)
        else:
            out[name] = (math.nan,) * 6 + (f"{type(res).__name__}: {res}",)
    return out


def run_study(
    configs: Sequence[tuple],
    estimators: Sequence[str] = DEFAULT_ESTIMATORS,
    replications: int = 100,
    base_seed: int = 0,
    tuning: Tuning = Tuning(),
    jobs: int = 1,
    zeta_convention: str = "printed",
    keep_estimates: bool = False,
    alpha: float = 0.05,
) -> SimulationReport:
    """Replicate every estimator over every ``(n, p)`` configuration.

    Each replication draws from its own stream keyed by ``(base_seed, n, p,
    rep)``, so results do not depend on ``jobs`` or scheduling order. Failed
    fits are excluded from the metrics and counted in ``failures``.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    unknown = [e for e in estimators if e not in ESTIMATORS + ("oracle",)]
    if unknown:
        raise ValueError(f"unknown estimators {unknown}")
    rows, kept = [], {}
    specs = {}
    for n, p in configs:
        if p not in specs:
            spec = calibrate(p, zeta_convention)
            targets = {
                "beta": population_beta(spec),
                "mu_balancing": population_mu(spec, "balancing"),
                "mu_unweighted": population_mu(spec, "unweighted"),
            }
            specs[p] = (spec, targets)
        spec, targets = specs[p]
        tasks = [(spec, n, r, base_seed, tuple(estimators), tuning, targets, alpha)
                 for r in range(replications)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_one_replication, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
        else:
            results = [_one_replication(t) for t in tasks]
        for name in estimators:
            arr = np.array([res[name][:6] for res in results], dtype=float)
            errors = [res[name][6] for res in results if res[name][6] is not None]
            ok = ~np.isnan(arr[:, 0])
            a = arr[ok]
            theta0 = spec.theta0
            if a.shape[0]:
                dev = a[:, 0] - theta0
                rmse = float(np.sqrt(np.mean(dev * dev)))
                bias = float(np.mean(a[:, 0]) - theta0)
                cover = float(np.mean((a[:, 1] <= theta0) & (theta0 <= a[:, 2])))
                mean_se = float(np.mean(a[:, 3]))
                b_l1 = float(np.mean(a[:, 4]))
                m_l1 = float(np.mean(a[:, 5]))
            else:
                rmse = bias = cover = mean_se = b_l1 = m_l1 = math.nan
            rows.append(StudyRow(n, p, name, int(ok.sum()), len(errors), rmse, bias, cover,
                                 mean_se, b_l1, m_l1, theta0))
            if keep_estimates:
                kept[(n, p, name)] = arr
    return SimulationReport(rows, base_seed, replications, zeta_convention, kept)
