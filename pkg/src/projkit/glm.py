"""Exponential-family observation models and the penalized IRLS solver.

Supports the three canonical-link families (gaussian/identity,
bernoulli/logit, poisson/log).  The solver maximizes the expected
log-likelihood with the observed targets replaced by mean-space targets,
which is the primitive every projection in this package reduces to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.special import expit, gammaln

from .errors import SingularMatrixError

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

# Mean-space clamp for bernoulli targets; keeps the working response finite
# when reference class probabilities approach 0 or 1.
BERNOULLI_MEAN_EPS = 1e-9


@dataclass(frozen=True)
class Family:
    """Canonical-link exponential family: gaussian, bernoulli or poisson."""

    kind: str

    _KINDS = ("gaussian", "bernoulli", "poisson")
    _LINKS = {"gaussian": "identity", "bernoulli": "logit", "poisson": "log"}

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown family kind: {self.kind!r}")

    @classmethod
    def of(cls, name: str) -> "Family":
        return cls(name.lower())

    @property
    def link(self) -> str:
        return self._LINKS[self.kind]

    @property
    def has_dispersion(self) -> bool:
        return self.kind == "gaussian"

    def mean(self, eta):
        """Inverse link: mean parameter for linear predictor ``eta``."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            return eta
        if self.kind == "bernoulli":
            return expit(eta)
        return np.exp(eta)

    def linkfun(self, mu):
        """Canonical link: natural parameter for mean ``mu``."""
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return mu
        if self.kind == "bernoulli":
            return np.log(mu) - np.log1p(-mu)
        return np.log(mu)

    def cumulant(self, eta):
        """B(eta), the log-partition function at the natural parameter."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            return 0.5 * eta**2
        if self.kind == "bernoulli":
            return np.logaddexp(0.0, eta)
        return np.exp(eta)

    def unit_variance(self, mu):
        """B''(xi(mu)): the variance function on the mean scale."""
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return np.ones_like(mu)
        if self.kind == "bernoulli":
            return mu * (1.0 - mu)
        return mu

    def clip_mean(self, mu):
        """Coerce targets into the open mean space (bernoulli clamp only)."""
        mu = np.asarray(mu, dtype=float)
        if self.kind == "bernoulli":
            return np.clip(mu, BERNOULLI_MEAN_EPS, 1.0 - BERNOULLI_MEAN_EPS)
        if self.kind == "poisson" and np.any(mu <= 0.0):
            raise ValueError("poisson mean targets must be strictly positive")
        return mu

    def validate_response(self, y) -> None:
        y = np.asarray(y)
        if not np.all(np.isfinite(y)):
            raise ValueError("response contains non-finite values")
        if self.kind == "bernoulli" and not np.all((y == 0) | (y == 1)):
            raise ValueError("bernoulli responses must be 0 or 1")
        if self.kind == "poisson" and (np.any(y < 0) or np.any(y != np.floor(y))):
            raise ValueError("poisson responses must be nonnegative integers")


@dataclass(frozen=True)
class DesignMatrix:
    """An n-by-q design; ``intercept`` flags a leading all-ones column."""

    values: np.ndarray
    intercept: bool = False

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape[0] < 1:
            raise ValueError("design matrix needs at least one row")
        if not np.all(np.isfinite(values)):
            raise ValueError("design matrix contains non-finite entries")
        if self.intercept and not np.all(values[:, 0] == 1.0):
            raise ValueError("intercept flag set but first column is not all ones")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def with_intercept(cls, X) -> "DesignMatrix":
        """Prepend an all-ones column to raw feature columns."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ones = np.ones((X.shape[0], 1))
        return cls(np.hstack([ones, X]), intercept=True)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def q(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FitResult:
    """Solver output: coefficients, convergence state, objective trace."""

    beta: np.ndarray
    dispersion: float | None
    converged: bool
    iterations: int
    objective_path: np.ndarray


def log_lik(family: Family, y, eta, dispersion: float | None = None):
    """Log density of ``y`` under the family at linear predictor ``eta``.

    ``dispersion`` must be supplied exactly when the family has one
    (gaussian noise variance).  Vectorized over broadcastable inputs; the
    bernoulli branch stays finite for arbitrarily large ``|eta|``.
    """
    family.validate_response(y)
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family.has_dispersion:
        if dispersion is None:
            raise ValueError("gaussian log_lik requires a dispersion")
        if dispersion <= 0:
            raise ValueError("dispersion must be positive")
        return -_HALF_LOG_2PI - 0.5 * np.log(dispersion) - 0.5 * (y - eta) ** 2 / dispersion
    if dispersion is not None:
        raise ValueError(f"{family.kind} log_lik takes no dispersion")
    if family.kind == "bernoulli":
        # y*eta - log(1 + e^eta), in the log1p form that never overflows
        return y * eta - np.logaddexp(0.0, eta)
    return y * eta - np.exp(eta) - gammaln(y + 1.0)


def _chol_solve(H: np.ndarray, rhs: np.ndarray, allow_singular_check: bool) -> np.ndarray:
    """Solve the SPD system H x = rhs, flagging rank deficiency."""
    try:
        c, low = sla.cho_factor(H, lower=True, check_finite=False)
    except sla.LinAlgError as exc:
        raise SingularMatrixError("normal-equations matrix is singular") from exc
    if allow_singular_check:
        d = np.diag(c)
        if (d.min() / d.max()) ** 2 < 1e-12:
            raise SingularMatrixError("normal-equations matrix is numerically singular")
    return sla.cho_solve((c, low), rhs, check_finite=False)


def solve_penalized_normal_equations(Xv: np.ndarray, targets: np.ndarray, penalty: np.ndarray) -> np.ndarray:
    """Gaussian-case solve: (X'X + diag(penalty))^{-1} X' targets.

    ``targets`` may be a matrix (one column per right-hand side); the
    singularity check is only applied when every penalty entry is zero.
    """
    H = Xv.T @ Xv
    if np.any(penalty > 0):
        H = H + np.diag(penalty)
    return _chol_solve(H, Xv.T @ targets, allow_singular_check=not np.any(penalty > 0))


def _ridge_penalty(X: DesignMatrix, ridge: float) -> np.ndarray:
    penalty = np.full(X.q, float(ridge))
    if X.intercept:
        penalty[0] = 0.0
    return penalty


def irls_fit(
    family: Family,
    X: DesignMatrix,
    targets,
    ridge: float = 0.0,
    tol: float = 1e-9,
    max_iter: int = 100,
) -> FitResult:
    """Maximize sum_i [mu*_i xi_i(beta) - B(xi_i(beta))] - ridge/2 ||beta||^2.

    ``targets`` are mean-space pseudo-observations; the intercept column is
    never penalized.  Convergence is declared when the largest absolute
    coefficient change drops below ``tol``.  Step halving (at most 10
    halvings per iteration) keeps the penalized objective non-decreasing.
    The dispersion field of the result is left unset.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    mu_star = family.clip_mean(np.asarray(targets, dtype=float))
    if mu_star.shape != (X.n,):
        raise ValueError("targets length must match design rows")
    penalty = _ridge_penalty(X, ridge)
    beta, converged, iters, path = _penalized_irls(family, X.values, mu_star, penalty, tol, max_iter)
    return FitResult(
        beta=beta,
        dispersion=None,
        converged=converged,
        iterations=iters,
        objective_path=np.asarray(path),
    )


def _objective(family: Family, Xv, beta, mu_star, penalty) -> float:
    eta = Xv @ beta
    return float(np.sum(mu_star * eta - family.cumulant(eta)) - 0.5 * np.sum(penalty * beta**2))


def _penalized_irls(family: Family, Xv, mu_star, penalty, tol, max_iter):
    """Newton iteration with step halving; returns (beta, converged, iters, objective path)."""
    q = Xv.shape[1]
    beta = np.zeros(q)
    obj = _objective(family, Xv, beta, mu_star, penalty)
    path = [obj]
    check_singular = not np.any(penalty > 0)
    for it in range(1, max_iter + 1):
        eta = Xv @ beta
        mu = family.mean(eta)
        w = np.maximum(family.unit_variance(mu), 1e-12)
        grad = Xv.T @ (mu_star - mu) - penalty * beta
        H = (Xv * w[:, None]).T @ Xv
        if np.any(penalty > 0):
            H = H + np.diag(penalty)
        step = _chol_solve(H, grad, allow_singular_check=check_singular)
        scale = 1.0
        for _ in range(10):
            cand = beta + scale * step
            cand_obj = _objective(family, Xv, cand, mu_star, penalty)
            if cand_obj >= obj:
                break
            scale *= 0.5
        else:
            cand = beta + scale * step
            cand_obj = _objective(family, Xv, cand, mu_star, penalty)
        delta = np.max(np.abs(cand - beta))
        beta, obj = cand, cand_obj
        path.append(obj)
        if delta < tol:
            return beta, True, it, path
    return beta, False, max_iter, path
