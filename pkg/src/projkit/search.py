"""Feature ordering and per-size projected submodels.

Two search strategies produce a most-to-least-relevant feature ordering
against a single-cluster reference fit: greedy forward selection on the
projection loss, or the order in which coefficients first become nonzero
along an elastic-net-penalized single-point projection path (cyclic
coordinate descent on an IRLS quadratic approximation, warm starts over a
log-spaced penalty grid, candidates standardized internally).  After
ordering, each path size is projected again without the L1 penalty
("relaxed", the default) or read off the penalized path.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .glm import DesignMatrix, Family
from .projection import (
    ProjectedSubmodel,
    ReferenceFit,
    candidate_columns,
    project,
    projection_loss,
)

CD_TOL = 1e-7
CD_MAX_PASSES = 200_000
CD_MAX_ROUNDS = 50
IRLS_MAX_OUTER = 100
ZERO_TOL = 1e-10


@dataclass(frozen=True)
class SearchConfig:
    method: str = "l1"
    alpha: float = 1.0
    nlambda: int = 100
    lambda_min_ratio: float | None = None  # default 1e-3 (n > p) or 1e-2
    penalty_factors: np.ndarray | None = None
    max_size: int | None = None
    relax: bool = True
    relax_ridge: float = 0.0

    def __post_init__(self):
        if self.method not in ("forward", "l1"):
            raise ValueError("method must be 'forward' or 'l1'")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]: pure ridge gives no ordering")
        if self.nlambda < 2:
            raise ValueError("nlambda must be at least 2")
        if self.relax_ridge < 0:
            raise ValueError("relax_ridge must be nonnegative")
        if self.penalty_factors is not None:
            pf = np.asarray(self.penalty_factors, dtype=float)
            if np.any(pf < 0) or not np.any(pf > 0):
                raise ValueError("penalty_factors must be nonnegative with a positive entry")
            object.__setattr__(self, "penalty_factors", pf)


@dataclass(frozen=True)
class SelectionPath:
    """Feature ordering plus the projected submodel at every size."""

    order: np.ndarray
    submodels: tuple[ProjectedSubmodel, ...]
    losses: np.ndarray

    def __post_init__(self):
        order = np.asarray(self.order, dtype=int)
        if len(np.unique(order)) != order.size:
            raise ValueError("feature order contains duplicates")
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "losses", np.asarray(self.losses, dtype=float))
        for k, sub in enumerate(self.submodels):
            if sub.feature_set != tuple(order[:k]):
                raise ValueError(f"submodel {k} does not match the order prefix")

    @property
    def max_size(self) -> int:
        return len(self.submodels) - 1


def _require_single_cluster(ref: ReferenceFit) -> None:
    if ref.n_clusters != 1:
        raise ValueError("selection-phase reference fits must have a single cluster")


def forward_search(
    family: Family,
    X_candidates,
    ref: ReferenceFit,
    max_size: int,
    ridge: float = 0.0,
) -> SelectionPath:
    """Greedy forward selection: add the feature whose inclusion yields the
    smallest projection loss; ties break toward the lower feature index."""
    _require_single_cluster(ref)
    cols = candidate_columns(X_candidates)
    p = cols.shape[1]
    max_size = min(max_size, p)
    selected: list[int] = []
    submodels = [project(family, cols, [], ref, ridge)]
    for _ in range(max_size):
        remaining = [j for j in range(p) if j not in selected]
        best_j, best_sub = None, None
        for j in remaining:
            sub = project(family, cols, selected + [j], ref, ridge)
            if best_sub is None or sub.loss < best_sub.loss:
                best_j, best_sub = j, sub
        selected.append(best_j)
        submodels.append(best_sub)
    return SelectionPath(
        order=np.asarray(selected, dtype=int),
        submodels=tuple(submodels),
        losses=np.asarray([s.loss for s in submodels]),
    )


# ---------------------------------------------------------------------------
# elastic-net path on the single-point projection


@dataclass(frozen=True)
class ElasticNetPath:
    lambdas: np.ndarray
    coefs: np.ndarray  # (L, p) on the raw feature scale
    intercepts: np.ndarray
    coefs_std: np.ndarray  # (L, p) on the standardized scale
    entry_index: np.ndarray  # first lambda index where each coefficient is nonzero
    converged: np.ndarray


def _soft_threshold(x: float, t: float) -> float:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def _cov_pass(G, g, beta, colnorm, denom, thresh, working):
    """One cyclic pass in covariance mode (G symmetric); returns max change."""
    delta = 0.0
    p = g.size
    for idx in range(working.size):
        j = working[idx]
        bj = beta[j]
        num = g[j] + colnorm[j] * bj
        if num > thresh[j]:
            new = (num - thresh[j]) / denom[j]
        elif num < -thresh[j]:
            new = (num + thresh[j]) / denom[j]
        else:
            new = 0.0
        if new != bj:
            diff = new - bj
            row = G[j]
            for t in range(p):
                g[t] -= row[t] * diff
            beta[j] = new
            if abs(diff) > delta:
                delta = abs(diff)
    return delta


@njit(cache=True)
def _resid_pass(XsT, r, wn, wsum, beta, beta0, colnorm, denom, thresh, working):
    """One cyclic pass on the residual representation (weighted case);
    returns (max change, new intercept)."""
    delta = 0.0
    n = r.size
    for idx in range(working.size):
        j = working[idx]
        bj = beta[j]
        col = XsT[j]
        num = colnorm[j] * bj
        for t in range(n):
            num += wn[t] * col[t] * r[t]
        if num > thresh[j]:
            new = (num - thresh[j]) / denom[j]
        elif num < -thresh[j]:
            new = (num + thresh[j]) / denom[j]
        else:
            new = 0.0
        if new != bj:
            diff = new - bj
            for t in range(n):
                r[t] -= col[t] * diff
            beta[j] = new
            if abs(diff) > delta:
                delta = abs(diff)
    d0 = 0.0
    for t in range(n):
        d0 += wn[t] * r[t]
    d0 /= wsum
    for t in range(n):
        r[t] -= d0
    if abs(d0) > delta:
        delta = abs(d0)
    return delta, beta0 + d0


def _working_set_solve(pass_once, kkt_gradient, beta, solvable, thresh):
    """Iterate a working set to tolerance, then admit subgradient violators."""
    working = np.flatnonzero((beta != 0) & solvable)
    for _ in range(CD_MAX_ROUNDS):
        settled = False
        for _ in range(CD_MAX_PASSES):
            if pass_once(working) < CD_TOL:
                settled = True
                break
        grad = kkt_gradient()
        violations = (beta == 0.0) & solvable & (np.abs(grad) > thresh + 1e-12)
        if not violations.any():
            return settled
        working = np.flatnonzero(((beta != 0) | violations) & solvable)
    return False


def _cd_solve(Xs, z, w, beta, beta0, lam, alpha, gammas):
    """Cyclic coordinate descent for one penalized weighted least squares.

    Minimizes (1/2n) sum w_i (z_i - b0 - x_i'b)^2
    + lam * sum gamma_j ((1-alpha)/2 b_j^2 + alpha |b_j|); the intercept is
    unpenalized.  Mutates ``beta``; returns (beta, beta0, converged).
    """
    n, _ = Xs.shape
    wn = w / n
    wsum = float(wn.sum())
    colnorm = wn @ (Xs * Xs)
    denom = colnorm + lam * gammas * (1.0 - alpha)
    thresh = lam * gammas * alpha
    r = z - beta0 - Xs @ beta
    XsT = np.ascontiguousarray(Xs.T)
    state = {"beta0": beta0}

    def pass_once(working):
        delta, state["beta0"] = _resid_pass(
            XsT, r, wn, wsum, beta, state["beta0"], colnorm, denom, thresh, working
        )
        return delta

    ok = _working_set_solve(pass_once, lambda: XsT @ (wn * r), beta, colnorm > 0.0, thresh)
    return beta, state["beta0"], ok


def _cd_solve_cov(G, g0, beta, lam, alpha, gammas):
    """Gaussian-case coordinate descent with covariance updates.

    The columns are centered, so the intercept decouples and the state is
    the current smooth-part gradient g = g0 - G beta, updated only when a
    coefficient moves.  Returns (beta, converged).
    """
    colnorm = np.ascontiguousarray(np.diag(G))
    denom = colnorm + lam * gammas * (1.0 - alpha)
    thresh = lam * gammas * alpha
    g = g0 - G @ beta if beta.any() else g0.copy()

    def pass_once(working):
        return _cov_pass(G, g, beta, colnorm, denom, thresh, working)

    ok = _working_set_solve(pass_once, lambda: g, beta, colnorm > 0.0, thresh)
    return beta, ok


def elastic_net_path(family: Family, X_candidates, mu_star, config: SearchConfig) -> ElasticNetPath:
    """Penalized single-point projection over a descending penalty grid.

    The smooth term is the expected negative log-likelihood with the
    reference means as pseudo-targets; the grid starts at the smallest
    penalty that zeroes every penalized coefficient.
    """
    cols = candidate_columns(X_candidates)
    n, p = cols.shape
    mu_star = family.clip_mean(np.asarray(mu_star, dtype=float))
    gammas = (
        np.ones(p) if config.penalty_factors is None else np.asarray(config.penalty_factors, float)
    )
    if gammas.shape != (p,):
        raise ValueError("penalty_factors length must match the candidate count")
    xm = cols.mean(axis=0)
    xs = cols.std(axis=0)
    xs[xs == 0] = 1.0
    Xs = (cols - xm) / xs
    mbar = float(mu_star.mean())
    grad0 = np.abs(Xs.T @ (mu_star - mbar)) / n
    pen = gammas > 0
    lam_max = float(np.max(grad0[pen] / (config.alpha * gammas[pen])))
    lam_max = max(lam_max, 1e-12)
    ratio = config.lambda_min_ratio if config.lambda_min_ratio is not None else (1e-3 if n > p else 1e-2)
    lambdas = np.geomspace(lam_max, lam_max * ratio, config.nlambda)

    beta = np.zeros(p)
    beta0 = float(family.linkfun(mbar))
    coefs_std = np.empty((config.nlambda, p))
    intercepts_std = np.empty(config.nlambda)
    entry = np.full(p, config.nlambda, dtype=int)
    converged = np.ones(config.nlambda, dtype=bool)
    if family.kind == "gaussian":
        gram = Xs.T @ Xs / n
        g0 = Xs.T @ (mu_star - mbar) / n
    for li, lam in enumerate(lambdas):
        if family.kind == "gaussian":
            beta, ok = _cd_solve_cov(gram, g0, beta, lam, config.alpha, gammas)
            beta0 = mbar  # centered columns decouple the intercept
        else:
            ok = True
            for _ in range(IRLS_MAX_OUTER):
                eta = beta0 + Xs @ beta
                mu = family.mean(eta)
                w = np.maximum(family.unit_variance(mu), 1e-9)
                z = eta + (mu_star - mu) / w
                prev, prev0 = beta.copy(), beta0
                beta, beta0, ok = _cd_solve(Xs, z, w, beta, beta0, lam, config.alpha, gammas)
                if max(np.max(np.abs(beta - prev)), abs(beta0 - prev0)) < CD_TOL:
                    break
            else:
                ok = False
        beta[np.abs(beta) < ZERO_TOL] = 0.0
        converged[li] = ok
        coefs_std[li] = beta
        intercepts_std[li] = beta0
        fresh = (beta != 0) & (entry == config.nlambda)
        entry[fresh] = li
    coefs = coefs_std / xs[None, :]
    intercepts = intercepts_std - coefs @ xm
    return ElasticNetPath(
        lambdas=lambdas,
        coefs=coefs,
        intercepts=intercepts,
        coefs_std=coefs_std,
        entry_index=entry,
        converged=converged,
    )


def l1_path(family: Family, X_candidates, ref: ReferenceFit, config: SearchConfig) -> np.ndarray:
    """Feature order from first nonzero entry along the penalty path.

    Earlier entry means more relevant; ties break by larger standardized
    coefficient magnitude at the tie penalty, then by lower index.  A
    coefficient that later re-zeros keeps its first-entry position.
    """
    _require_single_cluster(ref)
    path = elastic_net_path(family, X_candidates, ref.cluster_means[0], config)
    if not path.converged.all():
        bad = int(np.sum(~path.converged))
        warnings.warn(f"coordinate descent failed to converge at {bad} penalty value(s)", stacklevel=2)
    p = path.coefs.shape[1]
    entry = path.entry_index
    size_at_entry = np.zeros(p)
    for j in range(p):
        li = entry[j] if entry[j] < path.lambdas.size else path.lambdas.size - 1
        size_at_entry[j] = abs(path.coefs_std[li, j])
    order = np.lexsort((np.arange(p), -size_at_entry, entry))
    return order.astype(int)


def build_path(
    family: Family,
    X_candidates,
    ref_select: ReferenceFit,
    ref_predict: ReferenceFit,
    config: SearchConfig,
) -> SelectionPath:
    """Order features with the selection reference, then project the
    prediction reference onto every prefix of the order.

    With ``relax=False`` (l1 only) each size reuses the penalized
    coefficients at the smallest penalty whose active set stays inside the
    prefix; the result is then single-cluster by construction.
    """
    _require_single_cluster(ref_select)
    cols = candidate_columns(X_candidates)
    p = cols.shape[1]
    max_size = p if config.max_size is None else min(config.max_size, p)
    if config.method == "forward":
        if not config.relax:
            raise ValueError("relax=False needs a penalized path; use method='l1'")
        search = forward_search(family, cols, ref_select, max_size, config.relax_ridge)
        order = search.order
    else:
        order = l1_path(family, cols, ref_select, config)
    if config.relax:
        submodels = [
            project(family, cols, order[:k], ref_predict, config.relax_ridge)
            for k in range(max_size + 1)
        ]
        return SelectionPath(
            order=order,
            submodels=tuple(submodels),
            losses=np.asarray([s.loss for s in submodels]),
        )
    path = elastic_net_path(family, cols, ref_select.cluster_means[0], config)
    active_sets = [frozenset(np.flatnonzero(path.coefs_std[li])) for li in range(path.lambdas.size)]
    submodels = []
    for k in range(max_size + 1):
        allowed = frozenset(int(j) for j in order[:k])
        usable = [li for li, act in enumerate(active_sets) if act <= allowed]
        li = max(usable) if usable else 0  # largest index = smallest penalty
        submodels.append(_penalized_submodel(family, cols, order[:k], path, li, ref_select))
    return SelectionPath(
        order=order,
        submodels=tuple(submodels),
        losses=np.asarray([s.loss for s in submodels]),
    )


def _penalized_submodel(family, cols, feature_set, path: ElasticNetPath, li: int, ref: ReferenceFit):
    fs = tuple(int(j) for j in feature_set)
    coeffs = np.concatenate(([path.intercepts[li]], path.coefs[li, list(fs)]))[None, :]
    X_sub = DesignMatrix.with_intercept(cols[:, list(fs)])
    if family.has_dispersion:
        resid = X_sub.values @ coeffs[0] - ref.cluster_means[0]
        disp = np.array([float(ref.cluster_vars[0].mean() + np.mean(resid**2))])
    else:
        disp = None
    sub = ProjectedSubmodel(
        feature_set=fs,
        coeffs=coeffs,
        dispersions=disp,
        weights=np.array([1.0]),
        loss=np.nan,
    )
    loss = projection_loss(family, ref, sub, X_sub)
    return ProjectedSubmodel(fs, coeffs, disp, sub.weights, loss)
