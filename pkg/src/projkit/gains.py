"""Executable checks of the gain from fitting a submodel to a reference fit.

The gain G is the drop in expected squared prediction error (at the
observed inputs, over fresh noise) when least-squares coefficients are
computed against a reference fit mu* instead of the raw observations y.
Two routes compute it: the definition via expected prediction errors, and
the closed form (1/n)(||y - mu||_P^2 - ||mu* - mu||_P^2) with P the hat
matrix of the design.  Their exact agreement, and the Monte Carlo match
of the expected-gain decomposition, are the identities verified here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularMatrixError


@dataclass(frozen=True)
class GainInstance:
    """One concrete configuration: design, truth, noise level, reference fit, data."""

    X: np.ndarray
    mu: np.ndarray
    sigma2: float
    mu_star: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        n = X.shape[0]
        for name in ("mu", "mu_star", "y"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
            object.__setattr__(self, name, v)
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        object.__setattr__(self, "X", X)


def _thin_qr(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR of the design; raises if X is column rank deficient."""
    Q, R = np.linalg.qr(X)
    d = np.abs(np.diag(R))
    if d.min() <= 1e-12 * max(d.max(), 1.0):
        raise SingularMatrixError("design is column rank deficient")
    return Q, R


def _orthonormal_range(X: np.ndarray) -> np.ndarray:
    return _thin_qr(X)[0]


def _projected_sqnorm(Q: np.ndarray, v: np.ndarray) -> np.ndarray:
    # ||v||_P^2 with P = QQ^T, without forming P
    t = v @ Q
    return np.sum(t * t, axis=-1)


def gain_direct(inst: GainInstance) -> float:
    """Gain via the definition: expected-error difference of the two LS fits."""
    X = inst.X
    n = X.shape[0]
    Q, R = _thin_qr(X)
    beta_hat = np.linalg.solve(R, Q.T @ inst.y)
    beta_ref = np.linalg.solve(R, Q.T @ inst.mu_star)

    def expected_error(beta):
        return np.sum((X @ beta - inst.mu) ** 2) / n + inst.sigma2

    return float(expected_error(beta_hat) - expected_error(beta_ref))


def gain_closed_form(inst: GainInstance) -> float:
    """Gain via the closed form in projected norms."""
    Q = _orthonormal_range(inst.X)
    n = inst.X.shape[0]
    return float(
        (_projected_sqnorm(Q, inst.y - inst.mu) - _projected_sqnorm(Q, inst.mu_star - inst.mu)) / n
    )


def expected_gain_formula(X, sigma2: float, K, b) -> float:
    """Expected gain (1/n)(sigma2*p - tr(PK) - ||b||_P^2) for reference errors
    with mean ``b`` and covariance ``K``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    K = np.asarray(K, dtype=float)
    b = np.asarray(b, dtype=float)
    n, p = X.shape
    if K.shape != (n, n) or b.shape != (n,):
        raise ValueError("K must be n-by-n and b length n")
    if not np.allclose(K, K.T, atol=1e-10):
        raise ValueError("K must be symmetric")
    eigmin = float(np.linalg.eigvalsh(K).min())
    if eigmin < -1e-10:
        raise ValueError(f"K is not positive semidefinite (min eigenvalue {eigmin:.3e})")
    Q = _orthonormal_range(X)
    tr_pk = float(np.sum((Q.T @ K) * Q.T))
    b_p = float(_projected_sqnorm(Q, b))
    value = (sigma2 * p - tr_pk - b_p) / n
    if np.allclose(K, K[0, 0] * np.eye(n), atol=1e-12, rtol=0.0):
        # isotropic reference errors collapse to the per-dimension form
        collapsed = (p / n) * (sigma2 - K[0, 0] - b_p / p)
        if abs(collapsed - value) > 1e-10 * (1.0 + abs(value)):
            raise AssertionError("isotropic-case collapse failed internal consistency")
    return float(value)


def expected_gain_mc(
    X,
    sigma2: float,
    K,
    b,
    replications: int,
    seed: int,
    mu: np.ndarray | None = None,
) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the gain under the generative model.

    Each replication draws y = mu + eps and mu* = mu + e* with
    eps ~ N(0, sigma2 I) and e* ~ N(b, K); the result does not depend on
    the fixed vector ``mu``.
    """
    if replications < 100:
        raise ValueError("need at least 100 replications")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    K = np.asarray(K, dtype=float)
    b = np.asarray(b, dtype=float)
    mu = np.zeros(n) if mu is None else np.asarray(mu, dtype=float)
    Q = _orthonormal_range(X)
    # PSD square root; K may be singular (even zero)
    w, V = np.linalg.eigh(K)
    L = V * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((replications, n)) * np.sqrt(sigma2)
    e_star = b + rng.standard_normal((replications, n)) @ L.T
    y = mu + eps
    mu_star = mu + e_star
    gains = (_projected_sqnorm(Q, y - mu) - _projected_sqnorm(Q, mu_star - mu)) / n
    return float(gains.mean()), float(gains.std(ddof=1) / np.sqrt(replications))


def random_gain_instance(rng: np.random.Generator, n_range=(5, 100)) -> GainInstance:
    """A random full-rank instance for identity sweeps."""
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    p = int(rng.integers(1, n))
    X = rng.standard_normal((n, p))
    mu = rng.standard_normal(n)
    sigma2 = float(rng.uniform(0.2, 2.0))
    y = mu + rng.normal(scale=np.sqrt(sigma2), size=n)
    mu_star = mu + rng.normal(scale=rng.uniform(0.1, 1.0), size=n)
    return GainInstance(X=X, mu=mu, sigma2=sigma2, mu_star=mu_star, y=y)


def verify_gain_identity(instances: int, seed: int) -> dict:
    """Sweep random instances; reports the worst |direct - closed form| and tr(P) - p."""
    rng = np.random.default_rng(seed)
    max_gap = 0.0
    max_trace_gap = 0.0
    for _ in range(instances):
        inst = random_gain_instance(rng)
        max_gap = max(max_gap, abs(gain_direct(inst) - gain_closed_form(inst)))
        Q = _orthonormal_range(inst.X)
        max_trace_gap = max(max_trace_gap, abs(np.sum(Q * Q) - inst.X.shape[1]))
    return {
        "check": "gain_definition_vs_closed_form",
        "instances": instances,
        "max_abs_discrepancy": max_gap,
        "trace_discrepancy": max_trace_gap,
        "passed": bool(max_gap < 1e-10 and max_trace_gap < 1e-10),
    }


def verify_expected_gain(instances: int, replications: int, seed: int) -> dict:
    """Monte Carlo check of the expected-gain decomposition on random (X, K, b)."""
    rng = np.random.default_rng(seed)
    worst_z = 0.0
    for i in range(instances):
        n = int(rng.integers(6, 20))
        p = int(rng.integers(1, n - 1))
        X = rng.standard_normal((n, p))
        sigma2 = float(rng.uniform(0.3, 1.5))
        if i == 0:
            # break-even configuration: expected gain exactly zero
            K = sigma2 * np.eye(n)
            b = np.zeros(n)
        else:
            A = rng.standard_normal((n, n)) / np.sqrt(n)
            K = A @ A.T
            b = rng.normal(scale=0.3, size=n)
        target = expected_gain_formula(X, sigma2, K, b)
        mean, se = expected_gain_mc(X, sigma2, K, b, replications, seed=int(rng.integers(2**31)))
        worst_z = max(worst_z, abs(mean - target) / se)
    return {
        "check": "expected_gain_mc_vs_formula",
        "instances": instances,
        "replications": replications,
        "max_abs_z": worst_z,
        "passed": bool(worst_z < 3.0),
    }
