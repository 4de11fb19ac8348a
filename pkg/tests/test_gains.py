import numpy as np
import pytest

from projkit.errors import SingularMatrixError
from projkit.gains import (
    GainInstance,
    expected_gain_formula,
    expected_gain_mc,
    gain_direct,
    gain_closed_form,
    random_gain_instance,
    verify_expected_gain,
    verify_gain_identity,
)


def make_instance(seed=0, n=12, p=4):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    mu = rng.standard_normal(n)
    sigma2 = 0.8
    y = mu + rng.normal(scale=np.sqrt(sigma2), size=n)
    mu_star = mu + rng.normal(scale=0.3, size=n)
    return GainInstance(X=X, mu=mu, sigma2=sigma2, mu_star=mu_star, y=y)


def mc_expected_error(X, beta, mu, sigma2, rng, reps=10**6):
    """Brute-force expected prediction error over fresh noise draws."""
    fitted = X @ beta
    draws = mu + rng.normal(scale=np.sqrt(sigma2), size=(reps, len(mu)))
    errs = np.mean((fitted - draws) ** 2, axis=1)
    return errs.mean(), errs.std(ddof=1) / np.sqrt(reps)


class TestGainDirect:
    def test_zero_when_reference_equals_data(self):
        inst = make_instance(1)
        inst = GainInstance(X=inst.X, mu=inst.mu, sigma2=inst.sigma2, mu_star=inst.y, y=inst.y)
        assert gain_direct(inst) == pytest.approx(0.0, abs=1e-12)

    def test_perfect_reference_gain(self):
        # mu* = mu: gain reduces to the projected noise norm, nonnegative
        inst = make_instance(2)
        inst = GainInstance(X=inst.X, mu=inst.mu, sigma2=inst.sigma2, mu_star=inst.mu, y=inst.y)
        g = gain_direct(inst)
        assert g >= 0
        assert g == pytest.approx(gain_closed_form(inst), abs=1e-12)

    def test_against_monte_carlo_error_oracle(self):
        inst = make_instance(3)
        rng = np.random.default_rng(99)
        beta_hat = np.linalg.lstsq(inst.X, inst.y, rcond=None)[0]
        beta_ref = np.linalg.lstsq(inst.X, inst.mu_star, rcond=None)[0]
        e1, s1 = mc_expected_error(inst.X, beta_hat, inst.mu, inst.sigma2, rng)
        e2, s2 = mc_expected_error(inst.X, beta_ref, inst.mu, inst.sigma2, rng)
        assert gain_direct(inst) == pytest.approx(e1 - e2, abs=3 * np.hypot(s1, s2))

    def test_singular_design_raises(self):
        X = np.column_stack([np.ones(6), np.ones(6)])
        z = np.zeros(6)
        inst = GainInstance(X=X, mu=z, sigma2=1.0, mu_star=z, y=z)
        with pytest.raises(SingularMatrixError):
            gain_direct(inst)


class TestGainClosedForm:
    def test_identity_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            inst = random_gain_instance(rng)
            assert gain_direct(inst) == pytest.approx(gain_closed_form(inst), abs=1e-10)

    def test_both_norms_vanish(self):
        inst = make_instance(4)
        inst = GainInstance(X=inst.X, mu=inst.mu, sigma2=1.0, mu_star=inst.mu, y=inst.mu)
        assert gain_closed_form(inst) == pytest.approx(0.0, abs=1e-14)

    def test_reference_can_hurt(self):
        # reference error larger (in projected norm) than the noise: negative gain
        rng = np.random.default_rng(5)
        X = rng.standard_normal((10, 3))
        mu = rng.standard_normal(10)
        Q, _ = np.linalg.qr(X)
        y = mu + 0.01 * Q[:, 0]
        mu_star = mu + 5.0 * Q[:, 1]
        inst = GainInstance(X=X, mu=mu, sigma2=1.0, mu_star=mu_star, y=y)
        assert gain_closed_form(inst) < 0

    def test_scale_invariance_of_design(self):
        inst = make_instance(6)
        scaled = GainInstance(X=3.7 * inst.X, mu=inst.mu, sigma2=inst.sigma2, mu_star=inst.mu_star, y=inst.y)
        assert gain_closed_form(scaled) == pytest.approx(gain_closed_form(inst), abs=1e-12)


class TestExpectedGain:
    def test_break_even_is_zero(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((15, 4))
        K = 0.7 * np.eye(15)
        assert expected_gain_formula(X, 0.7, K, np.zeros(15)) == pytest.approx(0.0, abs=1e-12)

    def test_perfect_reference(self):
        rng = np.random.default_rng(2)
        n, p = 12, 5
        X = rng.standard_normal((n, p))
        got = expected_gain_formula(X, 1.3, np.zeros((n, n)), np.zeros(n))
        assert got == pytest.approx(1.3 * p / n, abs=1e-12)

    def test_non_psd_rejected(self):
        X = np.eye(3)
        K = np.diag([1.0, -0.5, 1.0])
        with pytest.raises(ValueError):
            expected_gain_formula(X, 1.0, K, np.zeros(3))

    def test_mc_matches_formula(self):
        rng = np.random.default_rng(10)
        n, p = 10, 3
        X = rng.standard_normal((n, p))
        A = rng.standard_normal((n, n)) / np.sqrt(n)
        K = A @ A.T
        b = rng.normal(scale=0.2, size=n)
        target = expected_gain_formula(X, 0.9, K, b)
        mean, se = expected_gain_mc(X, 0.9, K, b, replications=200_000, seed=77)
        assert mean == pytest.approx(target, abs=3 * se)

    def test_mc_invariant_to_mu(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((8, 2))
        K = 0.5 * np.eye(8)
        b = np.zeros(8)
        m0, s0 = expected_gain_mc(X, 1.0, K, b, replications=50_000, seed=3, mu=None)
        m1, s1 = expected_gain_mc(X, 1.0, K, b, replications=50_000, seed=4, mu=rng.standard_normal(8))
        assert m0 == pytest.approx(m1, abs=3 * np.hypot(s0, s1))

    def test_gain_scales_with_dimension(self):
        # nested designs, unbiased isotropic reference: expected gain tracks p
        rng = np.random.default_rng(12)
        n = 40
        X = rng.standard_normal((n, 8))
        g2 = expected_gain_formula(X[:, :2], 1.0, 0.4 * np.eye(n), np.zeros(n))
        g8 = expected_gain_formula(X, 1.0, 0.4 * np.eye(n), np.zeros(n))
        assert g8 == pytest.approx(4.0 * g2, rel=1e-10)

    def test_minimum_replications(self):
        with pytest.raises(ValueError):
            expected_gain_mc(np.eye(3), 1.0, np.eye(3), np.zeros(3), replications=10, seed=0)


class TestVerificationSweeps:
    def test_identity_sweep_passes(self):
        report = verify_gain_identity(instances=100, seed=0)
        assert report["passed"]
        assert report["max_abs_discrepancy"] < 1e-10

    def test_expected_gain_sweep_passes(self):
        report = verify_expected_gain(instances=5, replications=20_000, seed=1)
        assert report["passed"]
