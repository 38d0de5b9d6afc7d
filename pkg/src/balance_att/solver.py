"""Proximal-gradient minimizer for smooth convex losses plus a weighted l1 penalty.

Minimizes ``f(b) + lam * sum_j psi_j |b_j|`` where ``f`` is supplied as a
callback returning ``(value, gradient)``. Coordinates flagged ``exempt`` are
left unpenalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

Loss = Callable[[np.ndarray], Tuple[float, np.ndarray]]

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 20000
MIN_STEP = 1e-14


class SolverError(RuntimeError):
    pass


class LossDomainError(ArithmeticError):
    """Raised by loss callbacks when the argument leaves the safe domain.

    The solver treats it like an infinite objective value during line search.
    """


@dataclass(frozen=True)
class PenaltyPlan:
    """Overall level, per-coordinate loadings and the exempt mask."""

    lam: float
    loadings: np.ndarray
    exempt: Optional[np.ndarray] = None
    c: float = 1.1
    gamma: float = 0.05

    def __post_init__(self):
        psi = np.array(self.loadings, dtype=float).ravel()
        if not self.lam >= 0 or not np.isfinite(self.lam):
            raise ValueError(f"penalty level must be finite and >= 0, got {self.lam}")
        if not np.all(np.isfinite(psi)) or np.any(psi < 0):
            raise ValueError("loadings must be finite and nonnegative")
        ex = np.zeros(psi.size, bool) if self.exempt is None else np.array(self.exempt, bool).ravel()
        if ex.size != psi.size:
            raise ValueError("exempt mask and loadings differ in length")
        if self.c <= 1:
            raise ValueError("c must exceed 1")
        if not 0 < self.gamma < 2 * max(psi.size, 1):
            raise ValueError("gamma must lie in (0, 2p)")
        psi.setflags(write=False)
        ex.setflags(write=False)
        object.__setattr__(self, "loadings", psi)
        object.__setattr__(self, "exempt", ex)

    @property
    def p(self) -> int:
        return self.loadings.size

    @property
    def weights(self) -> np.ndarray:
        """Effective per-coordinate penalty ``lam * psi_j``, zero where exempt."""
        return np.where(self.exempt, 0.0, self.lam * self.loadings)

    def with_loadings(self, loadings) -> "PenaltyPlan":
        return PenaltyPlan(self.lam, loadings, self.exempt, self.c, self.gamma)

    @classmethod
    def unpenalized(cls, p: int) -> "PenaltyPlan":
        return cls(0.0, np.zeros(p))


@dataclass
class FitResult:
    coef: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    message: str = ""
    loading_trace: list = field(default_factory=list)

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.coef != 0)


def soft_threshold(v, t):
    """``sign(v) * max(|v| - t, 0)``, elementwise."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("threshold must be nonnegative")
    out = np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def penalty_value(plan: PenaltyPlan, coef: np.ndarray) -> float:
    return float(np.dot(plan.weights, np.abs(coef)))


def kkt_residual(loss: Loss, plan: PenaltyPlan, coef) -> float:
    """Sup-norm violation of the subgradient optimality conditions at ``coef``."""
    coef = np.asarray(coef, dtype=float)
    _, grad = loss(coef)
    w = np.where(plan.exempt, 0.0, plan.lam * plan.loadings)
    worst = 0.0
    for j in range(coef.size):
        if plan.exempt[j]:
            r = abs(grad[j])
        elif coef[j] != 0:
            r = abs(grad[j] + w[j] * np.sign(coef[j]))
        else:
            r = max(abs(grad[j]) - w[j], 0.0)
        worst = max(worst, r)
    return float(worst)


def _kkt_vec(grad, coef, w):
    # vectorized twin of kkt_residual used for the stopping rule
    r = np.where(coef != 0, np.abs(grad + w * np.sign(coef)), np.maximum(np.abs(grad) - w, 0.0))
    return float(r.max()) if r.size else 0.0


def _safe_eval(loss, x):
    try:
        f, g = loss(x)
    except LossDomainError:
        return np.inf, None
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return np.inf, None
    return float(f), np.asarray(g, dtype=float)


def minimize_composite(
    loss: Loss,
    plan: PenaltyPlan,
    init=None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    step: float = 1.0,
    accelerate: bool = True,
) -> FitResult:
    """Accelerated proximal gradient with backtracking and monotone restarts.

    Each trial step is shrunk by halving until the quadratic upper bound holds.
    A candidate that would raise the composite objective is discarded and
    momentum is reset, so accepted iterates are monotone. Stops once the KKT
    residual at the current iterate is at most ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    w = plan.weights
    x = np.zeros(plan.p) if init is None else np.array(init, dtype=float).ravel()
    if x.size != plan.p:
        raise ValueError(f"init has length {x.size}, plan expects {plan.p}")
    try:
        fx, gx = loss(x)
    except LossDomainError as exc:
        raise SolverError(f"loss undefined at initial point: {exc}") from exc
    if not np.isfinite(fx) or not np.all(np.isfinite(gx)):
        raise SolverError("non-finite loss or gradient at initial point")
    Fx = fx + penalty_value(plan, x)

    y, fy, gy = x, fx, gx
    t = 1.0
    s = float(step)
    kkt = _kkt_vec(gx, x, w)
    it = 0
    while kkt > tol and it < max_iter:
        it += 1
        while True:
            z = soft_threshold(y - s * gy, s * w) if w.size else y - s * gy
            z = np.asarray(z, dtype=float)
            fz, gz = _safe_eval(loss, z)
            dz = z - y
            if fz <= fy + gy @ dz + (dz @ dz) / (2 * s) + 1e-12 * abs(fy):
                break
            s *= 0.5
            if s < MIN_STEP:
                if not np.isfinite(fz):
                    raise SolverError(f"non-finite loss during line search at iteration {it}")
                return FitResult(x, Fx, kkt, it, False, "line search stalled")
        Fz = fz + penalty_value(plan, z)
        if Fz > Fx:
            if y is x:
                # plain prox step from x should not ascend; treat as numerical floor
                return FitResult(x, Fx, kkt, it, False, "no descent from current iterate")
            y, fy, gy, t = x, fx, gx, 1.0
            continue
        if accelerate:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            mom = (t - 1.0) / t_next
            x_prev = x
            x, fx, gx, Fx = z, fz, gz, Fz
            if mom > 0:
                y = x + mom * (x - x_prev)
                fy, gy = _safe_eval(loss, y)
                if gy is None:
                    y, fy, gy, t_next = x, fx, gx, 1.0
            else:
                y, fy, gy = x, fx, gx
            t = t_next
        else:
            x, fx, gx, Fx = z, fz, gz, Fz
            y, fy, gy = x, fx, gx
        kkt = _kkt_vec(gx, x, w)
        s *= 1.25
    converged = kkt <= tol
    return FitResult(x, Fx, kkt, it, converged, "" if converged else "max_iter reached")
