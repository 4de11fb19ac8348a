"""Projection of a reference posterior onto feature subsets.

The reference posterior enters as draws; they are clustered by k-means on
their latent fit vectors, each cluster is summarized by per-point
predictive means (and variances for gaussian noise), and every cluster is
projected independently: the submodel coefficients maximize the expected
log-likelihood with the cluster means as pseudo-targets, and the gaussian
dispersion picks up the reference predictive variance plus the mean
squared mismatch.  One cluster per draw recovers draw-by-draw projection,
a single cluster recovers the single-point projection.

Cluster summaries average on the mean scale (inverse link of the latent
fits); for bernoulli the within-cluster predictive is then exactly
Bernoulli(mean), while for poisson treating the mixture as
Poisson(mean) is an approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, rel_entr

from .glm import DesignMatrix, Family, irls_fit, log_lik, solve_penalized_normal_equations

KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class PosteriorDraws:
    """Joint posterior draws of reference coefficients (and noise variance).

    ``betas`` is S-by-q over the columns of ``ref_design``; ``dispersions``
    holds the per-draw gaussian noise variance and must be omitted for
    families without a dispersion.
    """

    betas: np.ndarray
    dispersions: np.ndarray | None
    ref_design: DesignMatrix

    def __post_init__(self):
        betas = np.atleast_2d(np.asarray(self.betas, dtype=float))
        if betas.shape[0] < 1 or not np.all(np.isfinite(betas)):
            raise ValueError("betas must be a nonempty finite S-by-q matrix")
        if betas.shape[1] != self.ref_design.q:
            raise ValueError("betas width must match reference design columns")
        object.__setattr__(self, "betas", betas)
        if self.dispersions is not None:
            d = np.asarray(self.dispersions, dtype=float)
            if d.shape != (betas.shape[0],) or not np.all(np.isfinite(d)) or np.any(d <= 0):
                raise ValueError("dispersions must be positive, one per draw")
            object.__setattr__(self, "dispersions", d)

    @property
    def n_draws(self) -> int:
        return self.betas.shape[0]

    def latent_fits(self, design: DesignMatrix | None = None) -> np.ndarray:
        """S-by-m matrix of linear predictors, one row per draw."""
        Z = self.ref_design if design is None else design
        return self.betas @ Z.values.T


@dataclass(frozen=True)
class ReferenceFit:
    """Clustered predictive summary of the reference model at n points.

    Row c of ``cluster_means`` is the per-point predictive mean within
    cluster c; ``cluster_vars`` (gaussian only) the per-point predictive
    variance.  ``labels`` assigns each draw to its cluster and ``weights``
    are the mixture weights (draw counts for a full-data fit, smoothed
    importance mass for a leave-one-out fit).
    """

    family: Family
    cluster_means: np.ndarray
    cluster_vars: np.ndarray | None
    weights: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.cluster_means, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (means.shape[0],):
            raise ValueError("one weight per cluster required")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("cluster weights must sum to 1")
        if (self.cluster_vars is not None) != self.family.has_dispersion:
            raise ValueError("cluster_vars present iff the family has a dispersion")
        object.__setattr__(self, "cluster_means", means)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=int))
        if self.cluster_vars is not None:
            v = np.atleast_2d(np.asarray(self.cluster_vars, dtype=float))
            if v.shape != means.shape or np.any(v < 0):
                raise ValueError("cluster_vars must be nonnegative and match cluster_means")
            object.__setattr__(self, "cluster_vars", v)

    @property
    def n_clusters(self) -> int:
        return self.cluster_means.shape[0]

    @property
    def n_points(self) -> int:
        return self.cluster_means.shape[1]

    def indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


@dataclass(frozen=True)
class ProjectedSubmodel:
    """Per-cluster projected coefficients for one feature subset.

    ``coeffs`` has one row per cluster, intercept first; ``loss`` is the
    weighted mean per-point KL divergence from the reference clusters.
    """

    feature_set: tuple[int, ...]
    coeffs: np.ndarray
    dispersions: np.ndarray | None
    weights: np.ndarray
    loss: float


def candidate_columns(X) -> np.ndarray:
    """Raw candidate feature columns from an array or DesignMatrix."""
    if isinstance(X, DesignMatrix):
        return X.values[:, 1:] if X.intercept else X.values
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise ValueError("candidate matrix contains non-finite entries")
    return X


def _submodel_design(X, feature_set) -> DesignMatrix:
    cols = candidate_columns(X)
    fs = tuple(int(j) for j in feature_set)
    if len(set(fs)) != len(fs):
        raise ValueError("feature_set contains duplicates")
    if fs and (min(fs) < 0 or max(fs) >= cols.shape[1]):
        raise ValueError("feature_set indexes outside the candidate columns")
    return DesignMatrix.with_intercept(cols[:, fs])


# ---------------------------------------------------------------------------
# k-means on latent fit vectors


def _kmeanspp_init(points, C, rng):
    S = points.shape[0]
    centers = np.empty((C, points.shape[1]))
    centers[0] = points[rng.integers(S)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, C):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(S)
        else:
            idx = rng.choice(S, p=d2 / total)
        centers[c] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    return centers


def _assign(points, centers):
    # ties resolve to the lowest cluster index via argmin
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1), d2


def _fix_empty_clusters(points, centers, labels, d2, C):
    """Re-seed each empty cluster from the point farthest from its centroid."""
    own = d2[np.arange(len(labels)), labels]
    taken: list[int] = []
    for c in range(C):
        if np.any(labels == c):
            continue
        order = np.argsort(-own)
        far = next(int(i) for i in order if int(i) not in taken)
        taken.append(far)
        centers[c] = points[far]
        labels[far] = c
        own[far] = 0.0
    return labels


def _kmeans_labels(points: np.ndarray, C: int, seed: int) -> np.ndarray:
    """Seeded k-means++ with restarts; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, np.inf
    for _ in range(KMEANS_RESTARTS):
        centers = _kmeanspp_init(points, C, rng)
        for _ in range(KMEANS_MAX_ITER):
            labels, d2 = _assign(points, centers)
            labels = _fix_empty_clusters(points, centers, labels, d2, C)
            new_centers = np.vstack([points[labels == c].mean(axis=0) for c in range(C)])
            if np.array_equal(new_centers, centers):
                break
            centers = new_centers
        labels, d2 = _assign(points, centers)
        labels = _fix_empty_clusters(points, centers, labels, d2, C)
        inertia = float(d2[np.arange(len(labels)), labels].sum())
        if inertia < best_inertia:  # strict: ties keep the earliest restart
            best_inertia, best_labels = inertia, labels.copy()
    # canonical ids: clusters numbered by first appearance in draw order
    remap, nxt = {}, 0
    out = np.empty_like(best_labels)
    for i, lab in enumerate(best_labels):
        if lab not in remap:
            remap[lab] = nxt
            nxt += 1
        out[i] = remap[lab]
    return out


# ---------------------------------------------------------------------------
# cluster summaries


def _weighted_variance(x, w):
    """Unbiased weighted sample variance along axis 0 (weights sum to 1)."""
    denom = 1.0 - float(np.sum(w**2))
    if denom <= 1e-12:
        return np.zeros(x.shape[1])
    m = w @ x
    return (w @ (x - m) ** 2) / denom


def cluster_stats_at(
    draws: PosteriorDraws,
    family: Family,
    labels: np.ndarray,
    design: DesignMatrix | None = None,
    draw_weights: np.ndarray | None = None,
):
    """Per-cluster predictive means/variances at the rows of ``design``.

    ``draw_weights`` (normalized over all draws) switches every average to
    its importance-weighted form and returns the per-cluster total mass as
    the mixture weights; without them clusters weigh by draw count.
    Returns ``(means, variances_or_None, weights)``.
    """
    S = draws.n_draws
    labels = np.asarray(labels, dtype=int)
    C = int(labels.max()) + 1
    fits = draws.latent_fits(design)
    mu_draws = family.mean(fits)
    m = fits.shape[1]
    if C == S and np.all(np.bincount(labels, minlength=C) == 1):
        # singleton clusters: within-cluster stats are the draws themselves
        draw_of = np.empty(S, dtype=int)
        draw_of[labels] = np.arange(S)
        means = mu_draws[draw_of]
        variances = (
            np.tile(draws.dispersions[draw_of][:, None], (1, m)) if family.has_dispersion else None
        )
        if draw_weights is None:
            weights = np.full(S, 1.0 / S)
        else:
            weights = np.asarray(draw_weights, dtype=float)[draw_of]
        return means, variances, weights
    means = np.empty((C, m))
    variances = np.empty((C, m)) if family.has_dispersion else None
    weights = np.empty(C)
    for c in range(C):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ValueError(f"cluster {c} has no draws")
        if draw_weights is None:
            w_in = np.full(idx.size, 1.0 / idx.size)
            weights[c] = idx.size / S
        else:
            mass = float(draw_weights[idx].sum())
            weights[c] = mass
            w_in = draw_weights[idx] / mass if mass > 0 else np.full(idx.size, 1.0 / idx.size)
        means[c] = w_in @ mu_draws[idx]
        if variances is not None:
            variances[c] = w_in @ draws.dispersions[idx] + _weighted_variance(fits[idx], w_in)
    return means, variances, weights


def cluster_draws(draws: PosteriorDraws, family: Family, C: int, seed: int = 0) -> ReferenceFit:
    """Cluster the draws by k-means on latent fits and summarize each cluster.

    ``C=1`` puts every draw in one cluster; ``C=S`` gives every draw its
    own cluster (weights 1/S) without running k-means.
    """
    S = draws.n_draws
    if not 1 <= C <= S:
        raise ValueError(f"cluster count {C} outside [1, {S}]")
    if family.has_dispersion and draws.dispersions is None:
        raise ValueError("gaussian reference draws need dispersions")
    if C == 1:
        labels = np.zeros(S, dtype=int)
    elif C == S:
        labels = np.arange(S)
    else:
        labels = _kmeans_labels(draws.latent_fits(), C, seed)
    means, variances, weights = cluster_stats_at(draws, family, labels)
    return ReferenceFit(
        family=family,
        cluster_means=means,
        cluster_vars=variances,
        weights=weights,
        labels=labels,
    )


# ---------------------------------------------------------------------------
# per-cluster projections


def project_gaussian_coeffs(X_sub: DesignMatrix, mu_star_c: np.ndarray) -> np.ndarray:
    """Least-squares coefficients fitting the cluster mean vector."""
    return solve_penalized_normal_equations(
        X_sub.values, np.asarray(mu_star_c, dtype=float), np.zeros(X_sub.q)
    )


def project_gaussian_dispersion(X_sub: DesignMatrix, beta_c, mu_star_c, vars_c) -> float:
    """Mean reference predictive variance plus mean squared fit mismatch."""
    vars_c = np.asarray(vars_c, dtype=float)
    if np.any(vars_c < 0):
        raise ValueError("reference variances must be nonnegative")
    resid = X_sub.values @ np.asarray(beta_c, dtype=float) - np.asarray(mu_star_c, dtype=float)
    return float(np.mean(vars_c) + np.mean(resid**2))


def project_cluster(family: Family, X_sub: DesignMatrix, ref: ReferenceFit, c: int, ridge: float = 0.0):
    """Project one reference cluster; returns (coefficients, dispersion or None)."""
    mu_c = ref.cluster_means[c]
    if family.has_dispersion:
        if ridge > 0:
            penalty = np.full(X_sub.q, float(ridge))
            penalty[0] = 0.0
            beta = solve_penalized_normal_equations(X_sub.values, mu_c, penalty)
        else:
            beta = project_gaussian_coeffs(X_sub, mu_c)
        return beta, project_gaussian_dispersion(X_sub, beta, mu_c, ref.cluster_vars[c])
    fit = irls_fit(family, X_sub, mu_c, ridge=ridge)
    return fit.beta, None


def project(family: Family, X_candidates, feature_set, ref: ReferenceFit, ridge: float = 0.0) -> ProjectedSubmodel:
    """Project every reference cluster onto ``feature_set`` (intercept always included)."""
    X_sub = _submodel_design(X_candidates, feature_set)
    if X_sub.n != ref.n_points:
        raise ValueError("candidate rows must match the reference fit points")
    C = ref.n_clusters
    if family.has_dispersion:
        penalty = np.full(X_sub.q, float(ridge))
        penalty[0] = 0.0
        coeffs = solve_penalized_normal_equations(X_sub.values, ref.cluster_means.T, penalty).T
        coeffs = np.atleast_2d(coeffs)
        resid = coeffs @ X_sub.values.T - ref.cluster_means
        dispersions = ref.cluster_vars.mean(axis=1) + np.mean(resid**2, axis=1)
    else:
        coeffs = np.vstack([project_cluster(family, X_sub, ref, c, ridge)[0] for c in range(C)])
        dispersions = None
    sub = ProjectedSubmodel(
        feature_set=tuple(int(j) for j in feature_set),
        coeffs=coeffs,
        dispersions=dispersions,
        weights=ref.weights.copy(),
        loss=np.nan,
    )
    loss = projection_loss(family, ref, sub, X_sub)
    return ProjectedSubmodel(sub.feature_set, coeffs, dispersions, sub.weights, loss)


# ---------------------------------------------------------------------------
# divergences and predictive densities


def kl_gaussian(mu1, var1, mu2, var2):
    """KL(N(mu1, var1) || N(mu2, var2)), vectorized; a degenerate var1 of
    zero yields the correct infinite divergence."""
    var1 = np.asarray(var1, dtype=float)
    var2 = np.asarray(var2, dtype=float)
    with np.errstate(divide="ignore"):
        return 0.5 * (
            np.log(var2 / var1) + (var1 + (np.asarray(mu1) - np.asarray(mu2)) ** 2) / var2 - 1.0
        )


def kl_bernoulli(p, q):
    """KL(Bernoulli(p) || Bernoulli(q)), safe at p in {0, 1}."""
    return rel_entr(p, q) + rel_entr(1.0 - np.asarray(p), 1.0 - np.asarray(q))


def kl_poisson(lam1, lam2):
    """KL(Poisson(lam1) || Poisson(lam2))."""
    return rel_entr(lam1, lam2) - np.asarray(lam1) + np.asarray(lam2)


def projection_loss(family: Family, ref: ReferenceFit, sub: ProjectedSubmodel, X_sub: DesignMatrix) -> float:
    """Weighted mean per-point KL from reference clusters to their projections."""
    eta = sub.coeffs @ X_sub.values.T
    if family.kind == "gaussian":
        kl = kl_gaussian(ref.cluster_means, ref.cluster_vars, eta, sub.dispersions[:, None])
    elif family.kind == "bernoulli":
        kl = kl_bernoulli(ref.cluster_means, family.mean(eta))
    else:
        kl = kl_poisson(ref.cluster_means, family.mean(eta))
    return max(float(ref.weights @ kl.mean(axis=1)), 0.0)


def _cluster_etas(sub: ProjectedSubmodel, X_new) -> np.ndarray:
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    design = np.hstack([np.ones((X_new.shape[0], 1)), X_new[:, list(sub.feature_set)]])
    return design @ sub.coeffs.T  # (m, C)


def submodel_log_density(family: Family, sub: ProjectedSubmodel, X_new, y_new) -> np.ndarray:
    """Log mixture predictive density of the submodel at each (x, y) row."""
    family.validate_response(y_new)
    eta = _cluster_etas(sub, X_new)
    y = np.asarray(y_new, dtype=float)
    if family.has_dispersion:
        comp = np.column_stack(
            [log_lik(family, y, eta[:, c], dispersion=float(sub.dispersions[c])) for c in range(eta.shape[1])]
        )
    else:
        comp = log_lik(family, y[:, None], eta)
    return logsumexp(comp + np.log(sub.weights)[None, :], axis=1)


def predictive_log_density(family: Family, sub: ProjectedSubmodel, x_new, y_new) -> float:
    """Log predictive density of the submodel mixture at a single point."""
    x_new = np.asarray(x_new, dtype=float)
    if x_new.ndim == 1:
        x_new = x_new[None, :]
    return float(submodel_log_density(family, sub, x_new, np.atleast_1d(y_new))[0])


def submodel_predictive_mean(family: Family, sub: ProjectedSubmodel, X_new) -> np.ndarray:
    """Mixture predictive mean of the submodel at each row of ``X_new``."""
    eta = _cluster_etas(sub, X_new)
    return family.mean(eta) @ sub.weights
