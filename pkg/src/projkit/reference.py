"""Reference model construction and ingestion.

The built-in recipe is supervised principal components: screen features by
absolute correlation with the response, take the leading principal
components of the survivors, and put a Bayesian linear (or logistic) head
on the component scores.  The head places a N(0, tau^2) prior on each
component coefficient; tau is marginalized over a log-spaced grid weighted
by marginal likelihood times a half-Student-t(4) hyperprior whose scale is
s_max^-2 (s_max = standard deviation of the largest component), so the
prior is roughly scale-free in the components.  The gaussian head is
conjugate given (tau, sigma^2) and sigma^2 gets an improper 1/sigma^2
prior handled on its own grid, so draws are exact up to the grid; the
non-gaussian head uses a Laplace approximation per tau and is documented
as such — exact posteriors can be supplied through `ingest_draws`.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import EmptyScreenError, ProjkitError
from .glm import DesignMatrix, Family, log_lik, _penalized_irls
from .projection import PosteriorDraws
from .simdata import abs_correlations

TAU_GRID_SIZE = 30
TAU_GRID_SPAN = 1e3  # grid covers [base/span, base*span]
SIGMA2_GRID_SIZE = 200
_NEGLIGIBLE_LOGMASS = -30.0


@dataclass(frozen=True)
class SpcConfig:
    n_components: int = 3
    n_gamma: int = 7
    cv_folds: int = 5
    n_draws: int = 4000
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be at least 1")
        if self.n_gamma < 2:
            raise ValueError("n_gamma must be at least 2")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")
        if self.n_draws < 1:
            raise ValueError("n_draws must be positive")


@dataclass(frozen=True)
class SpcTransform:
    """Raw features -> component scores: select, center, rotate."""

    mask: np.ndarray  # indices of screened features
    center: np.ndarray
    rotation: np.ndarray  # (len(mask), n_components), orthonormal columns

    def scores(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (X[:, self.mask] - self.center) @ self.rotation


@dataclass(frozen=True)
class ReferenceModel:
    """Posterior draws over a latent design, with the map from raw features."""

    draws: PosteriorDraws
    family: Family
    transform: SpcTransform | None = None
    gamma_chosen: float | None = None

    @property
    def screening_mask(self) -> np.ndarray | None:
        return None if self.transform is None else self.transform.mask

    @property
    def rotation(self) -> np.ndarray | None:
        return None if self.transform is None else self.transform.rotation

    def latent_design(self, X_new) -> DesignMatrix:
        """Design over the reference's own columns at new raw feature rows."""
        if self.transform is None:
            raise ProjkitError("ingested draws carry no feature transform for new points")
        return DesignMatrix.with_intercept(self.transform.scores(X_new))

    def predictive_mean(self, X_new=None) -> np.ndarray:
        """Posterior predictive mean at new raw rows (or the training design)."""
        design = None if X_new is None else self.latent_design(X_new)
        return self.family.mean(self.draws.latent_fits(design)).mean(axis=0)


def tau0(p0: float, p: float, sigma: float, n: int) -> float:
    """Prior scale concentrating mass on roughly p0 active coefficients."""
    if not 0 < p0 < p:
        raise ValueError("p0 must lie strictly between 0 and p")
    if sigma <= 0 or n < 1:
        raise ValueError("sigma must be positive and n at least 1")
    return p0 / (p - p0) * sigma / np.sqrt(n)


# ---------------------------------------------------------------------------
# screening and components


def screen(X, y, gamma: float) -> np.ndarray:
    """Boolean mask of features with |correlation with y| >= gamma.

    Zero-variance columns have no defined correlation; they are dropped
    with a warning.  An empty screen is an error.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sd = X.std(axis=0)
    if np.any(sd == 0):
        warnings.warn("dropping zero-variance feature columns from the screen", stacklevel=2)
    r = abs_correlations(X, np.asarray(y, dtype=float))
    mask = (r >= gamma) & (sd > 0)
    if not mask.any():
        raise EmptyScreenError(f"no feature reaches |correlation| {gamma}")
    return mask


def supervised_pcs(X, y, gamma: float, n_components: int):
    """Leading principal components of the screened feature block.

    Returns ``(scores, transform)``; components are ordered by decreasing
    singular value, with the sign fixed so each component's
    largest-magnitude loading is positive.  Fewer than ``n_components``
    survive when the screened block has lower rank.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mask = screen(X, y, gamma)
    idx = np.flatnonzero(mask)
    block = X[:, idx]
    center = block.mean(axis=0)
    centered = block - center
    U, s, Vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size else 0
    k = max(1, min(n_components, rank))
    rotation = Vt[:k].T
    flip = np.sign(rotation[np.argmax(np.abs(rotation), axis=0), np.arange(k)])
    flip[flip == 0] = 1.0
    rotation = rotation * flip
    transform = SpcTransform(mask=idx, center=center, rotation=rotation)
    return centered @ rotation, transform


def _gamma_grid(X, y, n_gamma: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    r = abs_correlations(X, y)
    r = r[X.std(axis=0) > 0]
    if r.size == 0:
        raise EmptyScreenError("every feature has zero variance")
    gamma_min = float(r.min())  # discards nothing
    if r.size == 1:
        return np.full(n_gamma, gamma_min)
    top2 = np.partition(r, -2)[-2:]
    gamma_max = float(np.nextafter(top2[0], np.inf))  # keeps exactly the top feature
    return np.linspace(gamma_min, gamma_max, n_gamma)


# ---------------------------------------------------------------------------
# Bayesian heads on the component scores


def _log_half_student_t4(tau: np.ndarray, scale: float) -> np.ndarray:
    # density shape of |T_4| * scale; constants cancel after normalization
    return -2.5 * np.log1p((tau / scale) ** 2 / 4.0)


def _tau_grid(s_max: float) -> np.ndarray:
    base = s_max**-2
    return np.geomspace(base / TAU_GRID_SPAN, base * TAU_GRID_SPAN, TAU_GRID_SIZE)


class _GaussianHead:
    """Exact conjugate head on a (tau, sigma^2) grid.

    Every grid cell carries the posterior mean and precision of the
    coefficients given its hyperparameters, plus the cell's posterior log
    mass; draws and predictive densities mix over the cells.
    """

    def __init__(self, Z: np.ndarray, y: np.ndarray, s_max: float, tau_grid=None):
        n, q = Z.shape
        self.q = q
        sd_y = max(float(np.std(y)), 1e-8)
        intercept_sd = 10.0 * sd_y
        if tau_grid is None:
            tau_grid = _tau_grid(max(s_max, 1e-8))
        sig2_grid = np.geomspace(1e-10, 10.0, SIGMA2_GRID_SIZE) * max(float(np.var(y)), 1e-12)
        B = Z.T @ Z
        Zty = Z.T @ y
        yty = float(y @ y)
        means, precisions, sigma2s, logws = [], [], [], []
        for tau in tau_grid:
            s0 = np.full(q, tau)
            s0[0] = intercept_sd
            D = np.diag(1.0 / s0**2)
            A = B[None, :, :] / sig2_grid[:, None, None] + D[None, :, :]
            L = np.linalg.cholesky(A)
            logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
            rhs = Zty[None, :] / sig2_grid[:, None]
            m = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
            quad = yty / sig2_grid - np.sum(m * rhs, axis=1)
            log_ml = (
                -0.5 * n * np.log(2.0 * np.pi * sig2_grid)
                - np.sum(np.log(s0))
                - 0.5 * logdet
                - 0.5 * quad
            )
            # improper 1/sigma^2 prior cancels against the log-grid measure
            logws.append(log_ml + _log_half_student_t4(np.array(tau), s_max**-2) + np.log(tau))
            means.append(m)
            precisions.append(A)
            sigma2s.append(sig2_grid)
        logw = np.concatenate(logws)
        self.log_mass = logw - logsumexp(logw)
        self.means = np.concatenate(means)
        self.precisions = np.concatenate(precisions)
        self.sigma2s = np.concatenate(sigma2s)

    def _active(self):
        keep = np.flatnonzero(self.log_mass > self.log_mass.max() + _NEGLIGIBLE_LOGMASS)
        w = np.exp(self.log_mass[keep])
        return keep, w / w.sum()

    def posterior_mean(self) -> np.ndarray:
        return np.exp(self.log_mass) @ self.means

    def sample(self, n_draws: int, rng: np.random.Generator):
        keep, w = self._active()
        picks = rng.choice(keep.size, size=n_draws, p=w)
        betas = np.empty((n_draws, self.q))
        sigmas = np.empty(n_draws)
        for u in np.unique(picks):
            ci = keep[u]
            rows = np.flatnonzero(picks == u)
            L = np.linalg.cholesky(self.precisions[ci])
            z = rng.standard_normal((self.q, rows.size))
            betas[rows] = (self.means[ci][:, None] + np.linalg.solve(L.T, z)).T
            sigmas[rows] = self.sigma2s[ci]
        return betas, sigmas

    def mean_log_predictive(self, Z_new: np.ndarray, y_new: np.ndarray) -> float:
        keep, w = self._active()
        K, m = keep.size, Z_new.shape[0]
        mean = self.means[keep] @ Z_new.T  # (K, m)
        rhs = np.broadcast_to(Z_new.T, (K, self.q, m))
        sol = np.linalg.solve(self.precisions[keep], rhs)
        var = self.sigma2s[keep][:, None] + np.einsum("qm,kqm->km", Z_new.T, sol)
        comp = -0.5 * np.log(2 * np.pi * var) - 0.5 * (y_new[None, :] - mean) ** 2 / var
        return float(np.mean(logsumexp(comp + np.log(w)[:, None], axis=0)))


class _LaplaceHead:
    """Gaussian approximation per tau cell for families without a dispersion."""

    def __init__(self, family: Family, Z: np.ndarray, y: np.ndarray, s_max: float):
        n, q = Z.shape
        self.family, self.Z, self.y = family, Z, y
        intercept_sd = 10.0
        tau_grid = _tau_grid(max(s_max, 1e-8))
        # the Newton engine maximizes sum(y*eta - B(eta)) - penalty: with the
        # observed responses as targets that is exactly the penalized MAP
        targets = np.asarray(y, dtype=float)
        cells = []
        logws = []
        for tau in tau_grid:
            s0 = np.full(q, tau)
            s0[0] = intercept_sd
            penalty = 1.0 / s0**2
            beta, _, _, _ = _penalized_irls(family, Z, targets, penalty, 1e-9, 100)
            eta = Z @ beta
            w_obs = np.maximum(family.unit_variance(family.mean(eta)), 1e-12)
            H = (Z * w_obs[:, None]).T @ Z + np.diag(penalty)
            sign, logdet = np.linalg.slogdet(H)
            loglik = float(np.sum(log_lik(family, y, eta)))
            logprior = float(np.sum(-0.5 * np.log(2 * np.pi * s0**2) - 0.5 * beta**2 / s0**2))
            evidence = loglik + logprior + 0.5 * q * np.log(2 * np.pi) - 0.5 * logdet
            lw = evidence + float(_log_half_student_t4(np.array(tau), s_max**-2)) + np.log(tau)
            cells.append((beta, H))
            logws.append(lw)
        logw = np.asarray(logws)
        self.log_mass = logw - logsumexp(logw)
        self.cells = cells

    def _active(self):
        keep = np.flatnonzero(self.log_mass > self.log_mass.max() + _NEGLIGIBLE_LOGMASS)
        w = np.exp(self.log_mass[keep])
        return keep, w / w.sum()

    def sample(self, n_draws: int, rng: np.random.Generator):
        keep, w = self._active()
        picks = rng.choice(keep.size, size=n_draws, p=w)
        q = self.Z.shape[1]
        betas = np.empty((n_draws, q))
        for u in np.unique(picks):
            beta, H = self.cells[keep[u]]
            rows = np.flatnonzero(picks == u)
            L = np.linalg.cholesky(H)
            z = rng.standard_normal((q, rows.size))
            betas[rows] = (beta[:, None] + np.linalg.solve(L.T, z)).T
        return betas, None

    def mean_log_predictive(self, Z_new: np.ndarray, y_new: np.ndarray) -> float:
        keep, w = self._active()
        comps = np.empty((y_new.size, keep.size))
        for j, ci in enumerate(keep):
            beta, H = self.cells[ci]
            mean = Z_new @ beta
            var = np.sum(Z_new * np.linalg.solve(H, Z_new.T).T, axis=1)
            if self.family.kind == "bernoulli":
                # probit-style shrinkage of the mean predictor
                eta = mean / np.sqrt(1.0 + np.pi * var / 8.0)
            else:
                eta = mean + var / 2.0
            comps[:, j] = log_lik(self.family, y_new, eta)
        return float(np.mean(logsumexp(comps + np.log(w)[None, :], axis=1)))


def _fit_head(family: Family, Z: np.ndarray, y: np.ndarray, s_max: float):
    if family.has_dispersion:
        return _GaussianHead(Z, y, s_max)
    return _LaplaceHead(family, Z, y, s_max)


def _score_design(scores: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((scores.shape[0], 1)), scores])


def _cv_folds(n: int, k: int, rng: np.random.Generator, labels: np.ndarray | None):
    idx = np.arange(n)
    if labels is not None:
        parts = [rng.permutation(idx[labels == v]) for v in np.unique(labels)]
        order = np.concatenate(parts)
        folds = [order[f::k] for f in range(k)]
    else:
        order = rng.permutation(idx)
        folds = np.array_split(order, k)
    return [np.sort(f) for f in folds]


def fit_spc_reference(X, y, family: Family, config: SpcConfig) -> ReferenceModel:
    """Supervised-principal-components reference with a Bayesian head.

    The screening threshold is chosen by cross-validated mean log
    predictive density over an evenly spaced grid from the
    keep-everything threshold to the keep-one threshold; screening,
    components, and the head are refit inside each fold.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    family.validate_response(y)
    n = X.shape[0]
    if n < config.cv_folds:
        raise ValueError("need at least as many rows as CV folds")
    grid = _gamma_grid(X, y, config.n_gamma)
    rng = np.random.default_rng(config.seed)
    labels = y if family.kind == "bernoulli" else None
    folds = _cv_folds(n, config.cv_folds, rng, labels)
    cv_mlpd = np.full(grid.size, -np.inf)
    for gi, gamma in enumerate(grid):
        fold_scores = []
        for fold in folds:
            train = np.setdiff1d(np.arange(n), fold)
            try:
                scores_tr, transform = supervised_pcs(X[train], y[train], gamma, config.n_components)
                Z_tr = _score_design(scores_tr)
                head = _fit_head(family, Z_tr, y[train], float(scores_tr.std(axis=0).max()))
                Z_te = _score_design(transform.scores(X[fold]))
                fold_scores.append(head.mean_log_predictive(Z_te, y[fold]))
            except (EmptyScreenError, np.linalg.LinAlgError):
                fold_scores = None
                break
        if fold_scores:
            cv_mlpd[gi] = float(np.mean(fold_scores))
    if not np.any(np.isfinite(cv_mlpd)):
        raise ProjkitError("reference CV failed at every screening threshold")
    gamma_star = float(grid[int(np.argmax(cv_mlpd))])
    scores, transform = supervised_pcs(X, y, gamma_star, config.n_components)
    Z = _score_design(scores)
    head = _fit_head(family, Z, y, float(scores.std(axis=0).max()))
    betas, sigmas = head.sample(config.n_draws, rng)
    draws = PosteriorDraws(
        betas=betas,
        dispersions=sigmas,
        ref_design=DesignMatrix(Z, intercept=True),
    )
    return ReferenceModel(draws=draws, family=family, transform=transform, gamma_chosen=gamma_star)


# ---------------------------------------------------------------------------
# external draw files


def write_design_csv(path, design: DesignMatrix) -> None:
    """Header + rows; an intercept column is named ``_intercept``."""
    cols = design.values.shape[1]
    names = []
    start = 0
    if design.intercept:
        names.append("_intercept")
        start = 1
    names += [f"z{j}" for j in range(1, cols - start + 1)]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in design.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_design_csv(path) -> DesignMatrix:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise ValueError(f"{path}: missing header row")
        names = header.split(",")
        rows = []
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(names):
                raise ValueError(f"{path}:{ln}: expected {len(names)} columns, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise ValueError(f"{path}:{ln}: non-numeric value") from exc
    if not rows:
        raise ValueError(f"{path}: no data rows")
    values = np.asarray(rows)
    intercept = names[0] == "_intercept"
    return DesignMatrix(values, intercept=intercept)


def write_draws_ndjson(path, draws: PosteriorDraws) -> None:
    """One JSON object per draw: {"beta": [...]} plus "sigma" for gaussian."""
    with open(path, "w") as fh:
        for s in range(draws.n_draws):
            rec = {"beta": [float(v) for v in draws.betas[s]]}
            if draws.dispersions is not None:
                rec["sigma"] = float(draws.dispersions[s])
            fh.write(json.dumps(rec) + "\n")


def read_draws_ndjson(path, family: Family, q: int) -> tuple[np.ndarray, np.ndarray | None]:
    betas = []
    sigmas = [] if family.has_dispersion else None
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{ln}: invalid JSON") from exc
            beta = rec.get("beta")
            if beta is None or len(beta) != q:
                raise ValueError(f"{path}:{ln}: 'beta' must be a list of {q} numbers")
            betas.append([float(v) for v in beta])
            if family.has_dispersion:
                if "sigma" not in rec:
                    raise ValueError(f"{path}:{ln}: gaussian draws require 'sigma'")
                sigmas.append(float(rec["sigma"]))
    if not betas:
        raise ValueError(f"{path}: no draws")
    return np.asarray(betas), (np.asarray(sigmas) if sigmas is not None else None)


def ingest_draws(design_path, draws_path, family: Family) -> ReferenceModel:
    """Wrap externally produced posterior draws over a supplied design."""
    design = read_design_csv(design_path)
    betas, sigmas = read_draws_ndjson(draws_path, family, design.q)
    if not np.all(np.isfinite(betas)) or (sigmas is not None and not np.all(np.isfinite(sigmas))):
        raise ValueError("draws contain non-finite entries")
    draws = PosteriorDraws(betas=betas, dispersions=sigmas, ref_design=design)
    return ReferenceModel(draws=draws, family=family)


def export_reference(model: ReferenceModel, design_path, draws_path) -> None:
    """Write the design/draws pair; round-trips bit-exactly through ingest."""
    write_design_csv(design_path, model.draws.ref_design)
    write_draws_ndjson(draws_path, model.draws)
