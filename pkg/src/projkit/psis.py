"""Pareto-smoothed importance sampling.

Raw importance weights are stabilized by fitting a generalized Pareto
distribution to the largest weights and replacing them with the expected
order statistics of the fit, then truncating at the raw maximum and
normalizing.  The fitted shape ``khat`` is the reliability diagnostic:
values at or below 0.7 indicate a usable approximation.
"""

from __future__ import annotations

import numpy as np

KHAT_THRESHOLD = 0.7
_GPD_PRIOR_POINTS = 30
_KHAT_PRIOR_WEIGHT = 10.0


def fit_generalized_pareto(x: np.ndarray) -> tuple[float, float]:
    """Profile-posterior estimate of generalized Pareto (shape, scale).

    Empirical Bayes scheme of Zhang and Stephens on positive exceedances,
    with the usual weakly informative adjustment pulling the shape toward
    1/2 for small samples.
    """
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    if n <= 1 or x[0] < 0 or x[-1] <= 0:
        raise ValueError("need at least two nonnegative exceedances with a positive maximum")
    m = _GPD_PRIOR_POINTS + int(np.sqrt(n))
    quart = x[int(n / 4 + 0.5) - 1]
    if quart <= 0:
        quart = x[x > 0][0]
    bs = (1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))) / (3.0 * quart) + 1.0 / x[-1]
    ks = np.mean(np.log1p(-bs[:, None] * x[None, :]), axis=1)
    logL = n * (np.log(-bs / ks) - ks - 1.0)
    w = np.exp(logL - logL.max())
    b = float(np.sum(bs * (w / w.sum())))
    k = float(np.mean(np.log1p(-b * x)))
    sigma = -k / b
    k = k * n / (n + _KHAT_PRIOR_WEIGHT) + 0.5 * _KHAT_PRIOR_WEIGHT / (n + _KHAT_PRIOR_WEIGHT)
    return k, float(sigma)


def _gpd_quantile(p: np.ndarray, k: float, sigma: float) -> np.ndarray:
    if abs(k) < 10 * np.finfo(float).eps:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def tail_length(S: int) -> int:
    """Number of weights treated as the tail to be smoothed."""
    return int(np.ceil(min(0.2 * S, 3.0 * np.sqrt(S))))


def psis_smooth(log_raw_weights) -> tuple[np.ndarray, float]:
    """Smooth raw log importance weights; returns (normalized weights, khat).

    The ``tail_length`` largest weights strictly above the next-largest
    weight are replaced by the (j - 1/2)/M quantiles of a generalized
    Pareto fit to their exceedances, everything is truncated at the raw
    maximum, and the result is normalized to sum to one.  Flat weights
    come back uniform with ``khat = -inf``; a tail too short to fit
    (fewer than five usable exceedances) is left unsmoothed with
    ``khat = nan``.
    """
    lw = np.asarray(log_raw_weights, dtype=float)
    S = lw.size
    if S < 5:
        raise ValueError("need at least 5 draws for Pareto smoothing")
    if not np.all(np.isfinite(lw)):
        raise ValueError("log weights must be finite")
    lw = lw - lw.max()
    if lw.min() == 0.0:
        return np.full(S, 1.0 / S), float("-inf")
    order = np.argsort(lw, kind="stable")
    M = tail_length(S)
    cutoff = lw[order[S - M - 1]]
    tail = order[S - M :]
    tail = tail[lw[tail] > cutoff]  # strict: ties with the cutoff stay in the body
    khat = float("nan")
    if tail.size > 4:
        exceed = np.exp(lw[tail]) - np.exp(cutoff)
        khat, sigma = fit_generalized_pareto(exceed)
        probs = (np.arange(1, tail.size + 1) - 0.5) / tail.size
        smoothed = np.log(_gpd_quantile(probs, khat, sigma) + np.exp(cutoff))
        lw = lw.copy()
        # tail entries are already in ascending weight order
        lw[tail] = np.minimum(smoothed, 0.0)
    w = np.exp(lw)
    return w / w.sum(), khat
