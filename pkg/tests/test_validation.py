import math

import numpy as np
import pytest

from projkit.errors import ProjkitError
from projkit.glm import DesignMatrix, Family
from projkit.projection import PosteriorDraws, ProjectedSubmodel, cluster_draws
from projkit.search import SearchConfig
from projkit.validation import (
    PointwiseUtilities,
    cv_varsel,
    eval_test,
    loo_reference_fit,
    make_folds,
    relative_utility,
    select_size,
    stratified_subsample,
)

GAUSSIAN = Family.of("gaussian")
BERNOULLI = Family.of("bernoulli")


def pw_from_rows(sizes, rows, u_ref=None):
    """Two-point utilities with chosen per-size (mean, se) relative values."""
    u_sub = np.array([[m - s, m + s] for m, s in rows])
    n = 2
    u_ref = np.zeros(n) if u_ref is None else u_ref
    return PointwiseUtilities(
        u_sub=u_sub,
        u_ref=u_ref,
        weights=np.full(n, 0.5),
        sizes=np.asarray(sizes),
    )


class ConjugateLinearRef:
    """Tiny conjugate gaussian reference over the raw features plus intercept."""

    def __init__(self, X, y, n_draws=200, seed=0, g=25.0):
        Z = np.column_stack([np.ones(len(y)), X])
        n, q = Z.shape
        V0_inv = np.eye(q) / g
        Vn = np.linalg.inv(Z.T @ Z + V0_inv)
        mn = Vn @ Z.T @ y
        a_n = 1.0 + n / 2.0
        b_n = 1.0 + 0.5 * (y @ y - mn @ (Z.T @ Z + V0_inv) @ mn)
        rng = np.random.default_rng(seed)
        sigma2 = b_n / rng.gamma(a_n, size=n_draws)
        L = np.linalg.cholesky(Vn)
        betas = mn[None, :] + (np.sqrt(sigma2)[:, None] * (rng.standard_normal((n_draws, q)) @ L.T))
        self.family = GAUSSIAN
        self.draws = PosteriorDraws(
            betas=betas, dispersions=sigma2, ref_design=DesignMatrix(Z, intercept=True)
        )

    def latent_design(self, X_new):
        return DesignMatrix.with_intercept(X_new)


def conjugate_builder(seed=0, n_draws=200):
    def build(X, y):
        return ConjugateLinearRef(X, y, n_draws=n_draws, seed=seed)

    return build


class TestRelativeUtility:
    def test_identical_utilities(self):
        pw = PointwiseUtilities(
            u_sub=np.tile(np.array([-1.2, -0.8, -1.0]), (2, 1)),
            u_ref=np.array([-1.2, -0.8, -1.0]),
            weights=np.full(3, 1 / 3),
            sizes=np.array([0, 1]),
        )
        s = relative_utility(pw)
        np.testing.assert_allclose(s.delta_mean, 0.0, atol=1e-15)
        np.testing.assert_allclose(s.delta_se, 0.0, atol=1e-15)

    def test_two_point_hand_evaluation(self):
        pw = PointwiseUtilities(
            u_sub=np.array([[-1.0, 1.0]]),
            u_ref=np.zeros(2),
            weights=np.full(2, 0.5),
            sizes=np.array([0]),
        )
        s = relative_utility(pw)
        assert s.delta_mean[0] == pytest.approx(0.0, abs=1e-15)
        # sample variance 2, se = sqrt(2/2) = 1
        assert s.delta_se[0] == pytest.approx(1.0, abs=1e-12)

    def test_zero_weight_point_equivalent_to_dropping_it(self):
        u = np.array([[0.3, -0.4, 9.9], [0.1, 0.2, -7.7]])
        ref = np.array([0.0, 0.1, 123.0])
        w3 = np.array([0.5, 0.5, 0.0])
        pw3 = PointwiseUtilities(u_sub=u, u_ref=ref, weights=w3, sizes=np.array([0, 1]))
        pw2 = PointwiseUtilities(
            u_sub=u[:, :2], u_ref=ref[:2], weights=np.full(2, 0.5), sizes=np.array([0, 1])
        )
        a, b = relative_utility(pw3), relative_utility(pw2)
        np.testing.assert_allclose(a.delta_mean, b.delta_mean, atol=1e-15)
        np.testing.assert_allclose(a.delta_se, b.delta_se, atol=1e-15)

    def test_single_positive_weight_rejected(self):
        pw = PointwiseUtilities(
            u_sub=np.zeros((1, 2)),
            u_ref=np.zeros(2),
            weights=np.array([1.0, 0.0]),
            sizes=np.array([0]),
        )
        with pytest.raises(ValueError):
            relative_utility(pw)


class TestSelectSize:
    def test_ref_rule_first_qualifying_size(self):
        pw = pw_from_rows([1, 2, 3], [(-1.0, 0.2), (-0.1, 0.2), (0.0, 0.2)])
        summary = relative_utility(pw)
        assert select_size(summary, "ref_1se") == 2

    def test_all_zero_selects_smallest(self):
        pw = pw_from_rows([0, 1, 2], [(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)])
        summary = relative_utility(pw)
        assert select_size(summary, "ref_1se") == 0
        assert select_size(summary, "best_1se") == 0

    def test_fallback_to_best_rule(self):
        pw = pw_from_rows([1, 2, 3], [(-3.0, 0.1), (-2.0, 0.1), (-1.0, 0.1)])
        summary = relative_utility(pw)
        assert select_size(summary, "ref_1se") == 3
        assert summary.selected_size["ref_1se"] == 3

    def test_invalid_rule(self):
        pw = pw_from_rows([0], [(0.0, 0.0)])
        with pytest.raises(ValueError):
            select_size(relative_utility(pw), "aic")


class TestFoldsAndSubsample:
    def test_folds_partition(self):
        folds = make_folds(23, 5, seed=0)
        allidx = np.sort(np.concatenate(folds))
        np.testing.assert_array_equal(allidx, np.arange(23))

    def test_stratified_folds_balance_labels(self):
        y = np.r_[np.ones(12), np.zeros(12)]
        folds = make_folds(24, 4, seed=1, labels=y)
        for f in folds:
            assert y[f].sum() == 3  # 3 of each class per fold

    def test_subsample_full_size_gives_uniform_weights(self):
        khat = np.r_[np.full(10, 0.2), np.full(6, 0.6), np.full(4, 0.9)]
        w = stratified_subsample(khat, m=20, seed=0)
        np.testing.assert_allclose(w, 1.0 / 20)

    def test_subsample_weight_structure(self):
        rng = np.random.default_rng(3)
        khat = rng.uniform(0.0, 1.0, size=30)
        w = stratified_subsample(khat, m=9, seed=5)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.sum(w > 0) == 9
        strata = [khat < 0.5, (khat >= 0.5) & (khat <= 0.7), khat > 0.7]
        for s in strata:
            sel = (w > 0) & s
            if sel.any():
                nj, mj = s.sum(), sel.sum()
                np.testing.assert_allclose(w[sel], nj / (30 * mj))

    def test_subsample_bounds(self):
        with pytest.raises(ValueError):
            stratified_subsample(np.zeros(10), m=2, seed=0)
        with pytest.raises(ValueError):
            stratified_subsample(np.zeros(10), m=11, seed=0)


class TestLooReferenceFit:
    def test_identical_draws_give_full_data_fit(self):
        rng = np.random.default_rng(7)
        Z = DesignMatrix.with_intercept(rng.standard_normal((12, 2)))
        beta = np.array([0.4, 1.0, -0.3])
        draws = PosteriorDraws(
            betas=np.tile(beta, (40, 1)),
            dispersions=np.full(40, 0.9),
            ref_design=Z,
        )
        y = rng.standard_normal(12)
        full = cluster_draws(draws, GAUSSIAN, C=1)
        loo, khat = loo_reference_fit(draws, GAUSSIAN, y, i=3, C=1)
        np.testing.assert_allclose(loo.cluster_means, full.cluster_means, atol=1e-12)
        np.testing.assert_allclose(loo.cluster_vars, full.cluster_vars, atol=1e-12)
        np.testing.assert_allclose(loo.weights, full.weights, atol=1e-12)
        assert khat == float("-inf")  # flat weights

    def test_khat_reported(self):
        rng = np.random.default_rng(8)
        ref = ConjugateLinearRef(rng.standard_normal((30, 2)), rng.standard_normal(30), n_draws=400, seed=1)
        y = rng.standard_normal(30)
        _, khat = loo_reference_fit(ref.draws, GAUSSIAN, y, i=0, C=1)
        assert np.isfinite(khat)


class TestEvalTest:
    def _single_gaussian_submodel(self, b0, b1, s2):
        return ProjectedSubmodel(
            feature_set=(0,),
            coeffs=np.array([[b0, b1]]),
            dispersions=np.array([s2]),
            weights=np.array([1.0]),
            loss=0.0,
        )

    def test_degenerate_fit_metrics(self):
        from projkit.search import SelectionPath

        rng = np.random.default_rng(9)
        x = rng.standard_normal(40)
        y = 2.0 * x
        sub0 = ProjectedSubmodel((), np.array([[0.0]]), np.array([1e-8]), np.array([1.0]), 0.0)
        sub1 = self._single_gaussian_submodel(0.0, 2.0, 1e-8)
        path = SelectionPath(order=np.array([0]), submodels=(sub0, sub1), losses=np.zeros(2))
        metrics = eval_test(GAUSSIAN, path, x[:, None], y)
        assert metrics.mlpd[1] > 5.0
        assert metrics.mse[1] == pytest.approx(0.0, abs=1e-12)

    def test_coin_flip_classifier(self):
        sub = ProjectedSubmodel((), np.array([[0.0]]), None, np.array([1.0]), 0.0)
        from projkit.search import SelectionPath

        path = SelectionPath(order=np.array([], dtype=int), submodels=(sub,), losses=np.zeros(1))
        y = np.r_[np.ones(7), np.zeros(3)]
        X = np.random.default_rng(0).standard_normal((10, 1))
        metrics = eval_test(BERNOULLI, path, X, y)
        assert metrics.mlpd[0] == pytest.approx(math.log(0.5), abs=1e-12)
        # p = 0.5 resolves to the positive class: majority base rate here
        assert metrics.accuracy[0] == pytest.approx(0.7)

    def test_mlpd_matches_direct_summation(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal(15)
        y = rng.standard_normal(15)
        sub = self._single_gaussian_submodel(0.3, -0.6, 1.4)
        from projkit.search import SelectionPath

        sub0 = ProjectedSubmodel((), np.array([[0.1]]), np.array([2.0]), np.array([1.0]), 0.0)
        path = SelectionPath(order=np.array([0]), submodels=(sub0, sub), losses=np.zeros(2))
        metrics = eval_test(GAUSSIAN, path, x[:, None], y)
        eta = 0.3 - 0.6 * x
        direct = np.mean(-0.5 * np.log(2 * np.pi * 1.4) - (y - eta) ** 2 / 2.8)
        assert metrics.mlpd[1] == pytest.approx(direct, abs=1e-12)


class TestCvVarsel:
    def _toy(self, seed=0, n=16, p=3):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, p))
        y = X[:, 0] - 0.5 * X[:, 1] + 0.5 * rng.standard_normal(n)
        return X, y

    @pytest.mark.parametrize("data_seed", [1, 21, 31])
    def test_kfold_equals_refit_loo(self, data_seed):
        X, y = self._toy(seed=data_seed, n=10)
        builder = conjugate_builder(seed=3, n_draws=150)
        config = SearchConfig(method="forward", max_size=2)
        res = cv_varsel(
            GAUSSIAN, X, y, builder, config, scheme="kfold", folds=10, clusters_pred=5, seed=0
        )
        # hand-rolled refit LOO with the same primitives
        from projkit.projection import cluster_stats_at, submodel_log_density
        from projkit.search import build_path
        from projkit.validation import reference_log_density

        n = len(y)
        for i in range(n):
            train = np.setdiff1d(np.arange(n), [i])
            model = builder(X[train], y[train])
            ref_pred = cluster_draws(model.draws, GAUSSIAN, 5, 0)
            ref_sel = cluster_draws(model.draws, GAUSSIAN, 1)
            path = build_path(GAUSSIAN, X[train], ref_sel, ref_pred, config)
            Z_te = model.latent_design(X[[i]])
            means, variances, wts = cluster_stats_at(model.draws, GAUSSIAN, ref_pred.labels, design=Z_te)
            u_ref_i = reference_log_density(GAUSSIAN, means, variances, wts, y[[i]])[0]
            assert res.summary.pointwise.u_ref[i] == pytest.approx(u_ref_i, abs=1e-12)
            for k in range(3):
                u_k = submodel_log_density(GAUSSIAN, path.submodels[k], X[[i]], y[[i]])[0]
                assert res.summary.pointwise.u_sub[k, i] == pytest.approx(u_k, abs=1e-12)

    def test_kfold_never_trains_on_evaluated_point(self):
        X, y = self._toy(seed=2, n=20)
        seen_trains = []

        base = conjugate_builder(seed=5, n_draws=100)

        def tracking_builder(X_tr, y_tr):
            seen_trains.append(np.asarray(X_tr))
            return base(X_tr, y_tr)

        res = cv_varsel(
            GAUSSIAN,
            X,
            y,
            tracking_builder,
            SearchConfig(method="forward", max_size=2),
            scheme="kfold",
            folds=4,
            seed=3,
        )
        assert res.fold_of is not None and np.all(res.fold_of >= 0)
        # skip the full-data build (first call); fold f trains without its points
        for f, X_tr in enumerate(seen_trains[1:]):
            test_rows = np.flatnonzero(res.fold_of == f)
            for i in test_rows:
                assert not any(np.allclose(X[i], row) for row in X_tr)

    def test_kfold_requires_builder(self):
        X, y = self._toy(seed=3)
        fixed = ConjugateLinearRef(X, y, n_draws=100, seed=0)
        with pytest.raises(ProjkitError):
            cv_varsel(GAUSSIAN, X, y, fixed, SearchConfig(max_size=2), scheme="kfold", folds=4)

    def test_fold_failures_skipped_then_aborted(self):
        X, y = self._toy(seed=4, n=20)
        base = conjugate_builder(seed=7, n_draws=80)
        calls = {"n": 0}

        def flaky(X_tr, y_tr):
            calls["n"] += 1
            if calls["n"] == 2:  # first fold build fails (call 1 is the full build)
                raise ProjkitError("synthetic failure")
            return base(X_tr, y_tr)

        with pytest.warns(UserWarning, match="skipped"):
            res = cv_varsel(
                GAUSSIAN,
                X,
                y,
                flaky,
                SearchConfig(method="forward", max_size=1),
                scheme="kfold",
                folds=10,
                seed=0,
            )
        assert res.failed_folds == 1

        def always_fail(X_tr, y_tr):
            if calls["n"] == 0:
                calls["n"] += 1
                return base(X_tr, y_tr)
            raise ProjkitError("synthetic failure")

        calls["n"] = 0
        with pytest.raises(ProjkitError), pytest.warns(UserWarning):
            cv_varsel(
                GAUSSIAN,
                X,
                y,
                always_fail,
                SearchConfig(method="forward", max_size=1),
                scheme="kfold",
                folds=5,
                seed=0,
            )

    def test_loo_self_projection_row_cancels(self):
        # candidates span the reference design: the full-size draw-by-draw
        # projection reproduces the reference pointwise
        X, y = self._toy(seed=5, n=12, p=2)
        ref = ConjugateLinearRef(X, y, n_draws=60, seed=9)
        res = cv_varsel(
            GAUSSIAN,
            X,
            y,
            ref,
            SearchConfig(method="forward", max_size=2),
            scheme="loo",
            clusters_pred=60,  # draw-by-draw
            seed=0,
        )
        pw = res.summary.pointwise
        np.testing.assert_allclose(pw.u_sub[2], pw.u_ref, atol=1e-10)
        assert abs(res.summary.delta_mean[2]) < 1e-10
        assert res.summary.delta_se[2] < 1e-10

    def test_results_independent_of_thread_count(self):
        X, y = self._toy(seed=9, n=14, p=3)
        ref = ConjugateLinearRef(X, y, n_draws=80, seed=6)
        config = SearchConfig(method="forward", max_size=3)
        one = cv_varsel(GAUSSIAN, X, y, ref, config, scheme="loo", clusters_pred=4, seed=1, threads=1)
        four = cv_varsel(GAUSSIAN, X, y, ref, config, scheme="loo", clusters_pred=4, seed=1, threads=4)
        np.testing.assert_array_equal(one.summary.pointwise.u_sub, four.summary.pointwise.u_sub)
        np.testing.assert_array_equal(one.summary.pointwise.u_ref, four.summary.pointwise.u_ref)

    def test_bare_posterior_draws_accepted(self):
        X, y = self._toy(seed=8, n=12)
        ref = ConjugateLinearRef(X, y, n_draws=60, seed=1)
        config = SearchConfig(method="forward", max_size=2)
        a = cv_varsel(GAUSSIAN, X, y, ref, config, scheme="loo", clusters_pred=3, seed=0)
        b = cv_varsel(GAUSSIAN, X, y, ref.draws, config, scheme="loo", clusters_pred=3, seed=0)
        np.testing.assert_allclose(a.summary.delta_mean, b.summary.delta_mean, atol=1e-14)

    def test_subsample_full_m_equals_loo(self):
        X, y = self._toy(seed=6, n=12)
        ref = ConjugateLinearRef(X, y, n_draws=80, seed=2)
        config = SearchConfig(method="forward", max_size=2)
        a = cv_varsel(GAUSSIAN, X, y, ref, config, scheme="loo", clusters_pred=4, seed=1)
        b = cv_varsel(
            GAUSSIAN, X, y, ref, config, scheme="loo_subsample", subsample=12, clusters_pred=4, seed=1
        )
        np.testing.assert_allclose(a.summary.delta_mean, b.summary.delta_mean, atol=1e-12)
        np.testing.assert_allclose(a.summary.pointwise.weights, b.summary.pointwise.weights)

    def test_selection_once_differs_from_per_fold(self):
        X, y = self._toy(seed=7, n=18, p=4)
        ref = ConjugateLinearRef(X, y, n_draws=100, seed=4)
        config = SearchConfig(max_size=3)
        per = cv_varsel(GAUSSIAN, X, y, ref, config, scheme="loo", clusters_pred=3, seed=2)
        once = cv_varsel(
            GAUSSIAN, X, y, ref, config, scheme="loo", clusters_pred=3, seed=2, selection="once"
        )
        # same reference utilities, generally different submodel utilities
        np.testing.assert_allclose(
            per.summary.pointwise.u_ref, once.summary.pointwise.u_ref, atol=1e-12
        )
        assert not np.allclose(per.summary.pointwise.u_sub, once.summary.pointwise.u_sub)

    def test_bernoulli_loo_runs(self):
        rng = np.random.default_rng(11)
        n = 14
        X = rng.standard_normal((n, 2))
        y = (X[:, 0] + 0.5 * rng.standard_normal(n) > 0).astype(float)

        from projkit.glm import irls_fit

        class LogisticLaplaceRef:
            family = BERNOULLI

            def __init__(self):
                Z = DesignMatrix.with_intercept(X)
                fit = irls_fit(BERNOULLI, Z, y, ridge=1.0)
                W = BERNOULLI.unit_variance(BERNOULLI.mean(Z.values @ fit.beta))
                H = (Z.values * W[:, None]).T @ Z.values + np.eye(3)
                cov = np.linalg.inv(H)
                betas = rng.multivariate_normal(fit.beta, cov, size=120)
                self.draws = PosteriorDraws(betas=betas, dispersions=None, ref_design=Z)

            def latent_design(self, X_new):
                return DesignMatrix.with_intercept(X_new)

        res = cv_varsel(
            BERNOULLI,
            X,
            y,
            LogisticLaplaceRef(),
            SearchConfig(method="forward", max_size=2, relax_ridge=0.1),
            scheme="loo",
            clusters_pred=5,
            seed=0,
        )
        assert np.all(np.isfinite(res.summary.delta_mean))
        assert res.summary.pointwise.khat is not None
