"""Out-of-sample utility estimation for every path size.

Three schemes produce pointwise log predictive densities u_k(i) for the
submodels and u_*(i) for the reference: K-fold refitting, importance-
sampling leave-one-out with Pareto smoothing, and a k-hat-stratified
subsample of the LOO folds.  Feature selection reruns inside every fold
or left-out point, so no observation is ever scored by a path that was
chosen using it.  Utilities aggregate into weighted relative means and
standard errors, and two one-standard-error rules pick the model size.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ProjkitError
from .glm import Family, log_lik
from .projection import (
    PosteriorDraws,
    ReferenceFit,
    candidate_columns,
    cluster_draws,
    cluster_stats_at,
    project,
    submodel_log_density,
    submodel_predictive_mean,
)
from .psis import KHAT_THRESHOLD, psis_smooth
from .search import SearchConfig, SelectionPath, build_path

MAX_FAILED_FOLD_FRACTION = 0.2


def _map_ordered(fn, items, threads: int):
    """Map preserving order; worker items are independent, results are
    reduced by position so the output is identical for any thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class PointwiseUtilities:
    """Per-point log predictive densities for each size and the reference.

    ``weights`` are the validation weights v_i (uniform over evaluated
    points for full LOO / K-fold, stratum-based for subsampling; zero
    marks a point that was not evaluated).
    """

    u_sub: np.ndarray  # (n_sizes, n)
    u_ref: np.ndarray  # (n,)
    weights: np.ndarray  # (n,), nonnegative, sums to 1
    sizes: np.ndarray  # (n_sizes,)
    khat: np.ndarray | None = None

    def __post_init__(self):
        u_sub = np.atleast_2d(np.asarray(self.u_sub, dtype=float))
        u_ref = np.asarray(self.u_ref, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        sizes = np.asarray(self.sizes, dtype=int)
        if u_sub.shape != (sizes.size, u_ref.size) or weights.shape != u_ref.shape:
            raise ValueError("utility shapes are inconsistent")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        live = weights > 0
        if not (np.all(np.isfinite(u_sub[:, live])) and np.all(np.isfinite(u_ref[live]))):
            raise ValueError("utilities at evaluated points must be finite")
        for name, val in (("u_sub", u_sub), ("u_ref", u_ref), ("weights", weights), ("sizes", sizes)):
            object.__setattr__(self, name, val)
        if self.khat is not None:
            object.__setattr__(self, "khat", np.asarray(self.khat, dtype=float))


@dataclass(frozen=True)
class UtilitySummary:
    """Relative and absolute utility estimates per size, with chosen sizes."""

    sizes: np.ndarray
    delta_mean: np.ndarray
    delta_se: np.ndarray
    abs_mean: np.ndarray
    abs_se: np.ndarray
    ref_mean: float
    selected_size: dict
    pointwise: PointwiseUtilities


def weighted_mean_se(values: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    """Weighted mean and its standard error sqrt(wvar/m), m = #{v_i > 0}."""
    m = int(np.sum(weights > 0))
    if m < 2:
        raise ValueError("standard error needs at least 2 points with positive weight")
    mean = float(weights @ values)
    denom = 1.0 - float(np.sum(weights**2))
    wvar = float(weights @ (values - mean) ** 2) / denom if denom > 1e-12 else 0.0
    return mean, float(np.sqrt(max(wvar, 0.0) / m))


def relative_utility(pw: PointwiseUtilities) -> UtilitySummary:
    """Weighted relative-to-reference utility estimates with both size rules."""
    K = pw.sizes.size
    delta_mean = np.empty(K)
    delta_se = np.empty(K)
    abs_mean = np.empty(K)
    abs_se = np.empty(K)
    for k in range(K):
        delta_mean[k], delta_se[k] = weighted_mean_se(pw.u_sub[k] - pw.u_ref, pw.weights)
        abs_mean[k], abs_se[k] = weighted_mean_se(pw.u_sub[k], pw.weights)
    summary = UtilitySummary(
        sizes=pw.sizes.copy(),
        delta_mean=delta_mean,
        delta_se=delta_se,
        abs_mean=abs_mean,
        abs_se=abs_se,
        ref_mean=float(pw.weights @ pw.u_ref),
        selected_size={},
        pointwise=pw,
    )
    summary.selected_size["ref_1se"] = select_size(summary, "ref_1se")
    summary.selected_size["best_1se"] = select_size(summary, "best_1se")
    return summary


def select_size(summary: UtilitySummary, rule: str = "ref_1se") -> int:
    """Smallest size within one standard error of the reference (or of the
    best submodel); the reference rule falls back to the best-submodel rule
    when no size qualifies."""
    if rule not in ("ref_1se", "best_1se"):
        raise ValueError("rule must be 'ref_1se' or 'best_1se'")
    if summary.sizes.size == 0:
        raise ValueError("empty summary")
    if rule == "ref_1se":
        ok = summary.delta_mean + summary.delta_se >= 0
        if ok.any():
            return int(summary.sizes[int(np.argmax(ok))])
        return select_size(summary, "best_1se")
    pw = summary.pointwise
    k_best = int(np.argmax(summary.delta_mean))
    for k in range(summary.sizes.size):
        mean, se = weighted_mean_se(pw.u_sub[k] - pw.u_sub[k_best], pw.weights)
        if mean + se >= 0:
            return int(summary.sizes[k])
    return int(summary.sizes[k_best])


# ---------------------------------------------------------------------------
# reference predictive densities and LOO reweighting


def reference_log_density(family: Family, means, variances, weights, y) -> np.ndarray:
    """Log density of the clustered reference predictive at each point."""
    means = np.atleast_2d(means)
    y = np.asarray(y, dtype=float)
    if family.has_dispersion:
        comp = (
            -0.5 * np.log(2 * np.pi * variances)
            - 0.5 * (y[None, :] - means) ** 2 / variances
        )
    else:
        eta = family.linkfun(family.clip_mean(means))
        comp = log_lik(family, y[None, :], eta)
    return logsumexp(comp + np.log(weights)[:, None], axis=0)


def loo_log_weights(draws: PosteriorDraws, family: Family, y) -> np.ndarray:
    """Raw leave-one-out log weights, one row per point: -log p(y_i | draw s)."""
    y = np.asarray(y, dtype=float)
    eta = draws.latent_fits()  # (S, n)
    if family.has_dispersion:
        disp = draws.dispersions[:, None]
        lp = -0.5 * np.log(2 * np.pi * disp) - 0.5 * (y[None, :] - eta) ** 2 / disp
    else:
        lp = log_lik(family, np.broadcast_to(y, eta.shape), eta)
    return -lp.T  # (n, S)


def loo_reference_fit(
    draws: PosteriorDraws,
    family: Family,
    y,
    i: int,
    C: int,
    seed: int = 0,
    labels: np.ndarray | None = None,
) -> tuple[ReferenceFit, float]:
    """Reference fit reweighted for leaving out point ``i``.

    Importance weights 1/p(y_i | draw) are Pareto smoothed; cluster means
    and variances become their weighted forms over the full-data cluster
    assignment (passed in as ``labels`` or recomputed with ``seed``), and
    the cluster weights become the smoothed mass per cluster.  Returns the
    fit and the Pareto shape diagnostic for the point.
    """
    if labels is None:
        labels = cluster_draws(draws, family, C, seed).labels
    lw = loo_log_weights(draws, family, y)[i]
    w, khat = psis_smooth(lw)
    means, variances, weights = cluster_stats_at(draws, family, labels, draw_weights=w)
    fit = ReferenceFit(
        family=family, cluster_means=means, cluster_vars=variances, weights=weights, labels=labels
    )
    return fit, khat


def _sliced_fit(family, means, variances, weights, labels, cols) -> ReferenceFit:
    return ReferenceFit(
        family=family,
        cluster_means=means[:, cols],
        cluster_vars=None if variances is None else variances[:, cols],
        weights=weights,
        labels=labels,
    )


# ---------------------------------------------------------------------------
# fold assignment and subsampling


def make_folds(n: int, k: int, seed: int, labels: np.ndarray | None = None) -> list[np.ndarray]:
    """Shuffled fold assignment; stratified by label when one is given."""
    if not 2 <= k <= n:
        raise ValueError("fold count must lie in [2, n]")
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    if labels is not None:
        order = np.concatenate([rng.permutation(idx[labels == v]) for v in np.unique(labels)])
        folds = [order[f::k] for f in range(k)]
    else:
        folds = np.array_split(rng.permutation(idx), k)
    return [np.sort(f) for f in folds]


def stratified_subsample(khat: np.ndarray, m: int, seed: int) -> np.ndarray:
    """Validation weights for an m-point subsample stratified by k-hat.

    Strata: below 0.5 (good), 0.5 to 0.7 (ok), above 0.7 (bad).  Each
    nonempty stratum contributes min(floor(m/3), size) points; the
    remainder tops up at random.  Selected points in stratum j carry
    weight n_j / (n m_j); the rest get zero.
    """
    khat = np.asarray(khat, dtype=float)
    n = khat.size
    if not 3 <= m <= n:
        raise ValueError("subsample size must lie in [3, n]")
    rng = np.random.default_rng(seed)
    strata = [np.flatnonzero(khat < 0.5), np.flatnonzero((khat >= 0.5) & (khat <= KHAT_THRESHOLD)), np.flatnonzero(khat > KHAT_THRESHOLD)]
    chosen: list[np.ndarray] = []
    per = m // 3
    for s in strata:
        take = min(per, s.size)
        chosen.append(rng.choice(s, size=take, replace=False) if take else np.empty(0, dtype=int))
    picked = np.concatenate(chosen)
    rest = np.setdiff1d(np.arange(n), picked)
    short = m - picked.size
    if short > 0:
        picked = np.concatenate([picked, rng.choice(rest, size=short, replace=False)])
    weights = np.zeros(n)
    stratum_of = np.empty(n, dtype=int)
    for j, s in enumerate(strata):
        stratum_of[s] = j
    for j, s in enumerate(strata):
        mj = int(np.sum(stratum_of[picked] == j))
        if mj:
            sel = picked[stratum_of[picked] == j]
            weights[sel] = s.size / (n * mj)
    return weights


# ---------------------------------------------------------------------------
# the validation driver


@dataclass(frozen=True)
class CvResult:
    path: SelectionPath  # selection on the full data, for reporting
    summary: UtilitySummary
    fold_of: np.ndarray | None = None  # kfold bookkeeping
    failed_folds: int = 0


def _as_builder(reference):
    if callable(reference):
        return reference
    return None


@dataclass(frozen=True)
class _BareDraws:
    """Adapter for callers handing over posterior draws without a model."""

    draws: PosteriorDraws


def _full_model(reference, X, y):
    builder = _as_builder(reference)
    if builder is not None:
        return builder(X, y)
    if isinstance(reference, PosteriorDraws):
        return _BareDraws(reference)
    return reference


def _prediction_clusters(draws: PosteriorDraws, family: Family, clusters_pred: int, seed: int):
    C = min(clusters_pred, draws.n_draws)
    return cluster_draws(draws, family, C, seed)


def cv_varsel(
    family: Family,
    X,
    y,
    reference,
    config: SearchConfig,
    scheme: str = "loo",
    *,
    folds: int = 10,
    subsample: int | None = None,
    clusters_pred: int = 10,
    seed: int = 0,
    selection: str = "per_fold",
    threads: int = 1,
) -> CvResult:
    """Validated selection: the full-data path plus cross-validated utilities.

    ``reference`` is either a fitted reference model (fixed posterior
    draws; usable with the LOO schemes) or a builder callable
    ``(X, y) -> model`` (required for K-fold, which refits per fold).
    ``selection='once'`` reuses the full-data feature order inside every
    LOO fold — the biased shortcut, available for bias studies only.
    """
    if scheme not in ("kfold", "loo", "loo_subsample"):
        raise ValueError("scheme must be kfold, loo, or loo_subsample")
    if selection not in ("per_fold", "once"):
        raise ValueError("selection must be 'per_fold' or 'once'")
    cols = candidate_columns(X)
    y = np.asarray(y, dtype=float)
    family.validate_response(y)
    n = cols.shape[0]
    model = _full_model(reference, cols, y)
    draws = model.draws
    ref_predict = _prediction_clusters(draws, family, clusters_pred, seed)
    ref_select = cluster_draws(draws, family, 1)
    full_path = build_path(family, cols, ref_select, ref_predict, config)
    n_sizes = full_path.max_size + 1
    sizes = np.arange(n_sizes)

    if scheme == "kfold":
        pw, fold_of, failed = _kfold_utilities(
            family, cols, y, reference, config, folds, clusters_pred, seed, n_sizes, threads
        )
        summary = relative_utility(pw)
        return CvResult(path=full_path, summary=summary, fold_of=fold_of, failed_folds=failed)

    lw = loo_log_weights(draws, family, y)
    smoothed = np.empty((n, draws.n_draws))
    khat = np.empty(n)
    for i in range(n):
        smoothed[i], khat[i] = psis_smooth(lw[i])

    if scheme == "loo_subsample":
        if subsample is None:
            raise ValueError("loo_subsample needs a subsample size")
        weights = stratified_subsample(khat, subsample, seed)
    else:
        weights = np.full(n, 1.0 / n)
    evaluate = np.flatnonzero(weights > 0)

    u_sub = np.zeros((n_sizes, n))
    u_ref = np.zeros(n)
    labels_pred = ref_predict.labels

    def point_job(i):
        return _loo_point(
            family, cols, y, draws, labels_pred, smoothed[i], int(i), config, full_path, selection
        )

    for i, (ur, us) in zip(evaluate, _map_ordered(point_job, list(evaluate), threads)):
        u_ref[i] = ur
        u_sub[:, i] = us
    pw = PointwiseUtilities(u_sub=u_sub, u_ref=u_ref, weights=weights, sizes=sizes, khat=khat)
    return CvResult(path=full_path, summary=relative_utility(pw))


def _loo_point(family, cols, y, draws, labels_pred, w, i, config, full_path, selection):
    """Utilities at one left-out point from the reweighted reference.

    Search and projection see only the other n-1 rows; the point enters
    through the smoothed weights and the final density evaluations.
    """
    n = cols.shape[0]
    keep = np.flatnonzero(np.arange(n) != i)
    means_p, vars_p, weights_p = cluster_stats_at(draws, family, labels_pred, draw_weights=w)
    ref_pred = _sliced_fit(family, means_p, vars_p, weights_p, labels_pred, keep)
    u_ref_i = float(
        reference_log_density(
            family,
            means_p[:, [i]],
            None if vars_p is None else vars_p[:, [i]],
            weights_p,
            y[[i]],
        )[0]
    )
    X_tr = cols[keep]
    if selection == "per_fold":
        zero_labels = np.zeros(draws.n_draws, dtype=int)
        means_s, vars_s, weights_s = cluster_stats_at(draws, family, zero_labels, draw_weights=w)
        ref_sel = _sliced_fit(family, means_s, vars_s, weights_s, zero_labels, keep)
        path_i = build_path(family, X_tr, ref_sel, ref_pred, config)
        subs = path_i.submodels
    else:
        subs = tuple(
            project(family, X_tr, full_path.order[:k], ref_pred, config.relax_ridge)
            for k in range(full_path.max_size + 1)
        )
    u_sub_i = np.array(
        [submodel_log_density(family, sub, cols[[i]], y[[i]])[0] for sub in subs]
    )
    return u_ref_i, u_sub_i


def _kfold_fold_job(family, cols, y, builder, config, clusters_pred, seed, n_sizes, test):
    train = np.setdiff1d(np.arange(cols.shape[0]), test)
    model_f = builder(cols[train], y[train])
    draws_f = model_f.draws
    ref_pred_f = _prediction_clusters(draws_f, family, clusters_pred, seed)
    ref_sel_f = cluster_draws(draws_f, family, 1)
    path_f = build_path(family, cols[train], ref_sel_f, ref_pred_f, config)
    Z_te = model_f.latent_design(cols[test])
    means, variances, wts = cluster_stats_at(draws_f, family, ref_pred_f.labels, design=Z_te)
    u_ref_f = reference_log_density(family, means, variances, wts, y[test])
    u_sub_f = np.vstack(
        [
            submodel_log_density(family, path_f.submodels[kk], cols[test], y[test])
            for kk in range(n_sizes)
        ]
    )
    return u_ref_f, u_sub_f


def _kfold_utilities(family, cols, y, reference, config, k, clusters_pred, seed, n_sizes, threads=1):
    builder = _as_builder(reference)
    if builder is None:
        raise ProjkitError("kfold validation refits the reference; pass a builder callable")
    n = cols.shape[0]
    strat = y if family.kind == "bernoulli" else None
    folds = make_folds(n, k, seed, strat)

    def job(test):
        try:
            return _kfold_fold_job(
                family, cols, y, builder, config, clusters_pred, seed, n_sizes, test
            )
        except (ProjkitError, np.linalg.LinAlgError) as exc:
            return exc

    results = _map_ordered(job, folds, threads)
    u_sub = np.zeros((n_sizes, n))
    u_ref = np.zeros(n)
    fold_of = np.full(n, -1, dtype=int)
    evaluated = np.zeros(n, dtype=bool)
    failed = 0
    for f, (test, res) in enumerate(zip(folds, results)):
        if isinstance(res, Exception):
            failed += 1
            warnings.warn(f"fold {f} skipped: {res}", stacklevel=2)
            if failed > MAX_FAILED_FOLD_FRACTION * len(folds):
                raise ProjkitError(f"{failed} of {len(folds)} folds failed") from res
            continue
        u_ref[test], u_sub[:, test] = res
        evaluated[test] = True
        fold_of[test] = f
    weights = evaluated / evaluated.sum()
    pw = PointwiseUtilities(
        u_sub=u_sub, u_ref=u_ref, weights=weights, sizes=np.arange(n_sizes), khat=None
    )
    return pw, fold_of, failed


# ---------------------------------------------------------------------------
# held-out evaluation


@dataclass(frozen=True)
class TestMetrics:
    """Per-size held-out metrics for one selection path."""

    sizes: np.ndarray
    mlpd: np.ndarray
    mse: np.ndarray | None  # gaussian
    accuracy: np.ndarray | None  # bernoulli


def eval_test(family: Family, path: SelectionPath, X_test, y_test) -> TestMetrics:
    """Mean log predictive density per size on disjoint test data, plus
    squared error against the mixture mean (gaussian) or 0.5-threshold
    accuracy (bernoulli)."""
    cols = candidate_columns(X_test)
    y_test = np.asarray(y_test, dtype=float)
    family.validate_response(y_test)
    K = path.max_size + 1
    mlpd = np.empty(K)
    mse = np.empty(K) if family.kind == "gaussian" else None
    acc = np.empty(K) if family.kind == "bernoulli" else None
    for k, sub in enumerate(path.submodels):
        mlpd[k] = float(np.mean(submodel_log_density(family, sub, cols, y_test)))
        mean = submodel_predictive_mean(family, sub, cols)
        if mse is not None:
            mse[k] = float(np.mean((y_test - mean) ** 2))
        if acc is not None:
            # class probability at exactly 0.5 resolves to the positive class
            acc[k] = float(np.mean((mean >= 0.5) == (y_test > 0.5)))
    return TestMetrics(sizes=np.arange(K), mlpd=mlpd, mse=mse, accuracy=acc)
