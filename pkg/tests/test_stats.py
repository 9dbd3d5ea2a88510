import numpy as np
import pytest

from stochaccel import (
    EnsembleResult,
    PulsePlasmaConfig,
    WienerDriver,
    batch_se,
    dispersion_curve,
    estimate_moments,
    example1_model,
    integrate_ensemble,
    integrate_pairs_ensemble,
    weak_order_fit,
)


def fake_result(states, failed=None):
    N, T, d = states.shape
    return EnsembleResult(np.arange(T, dtype=float), states,
                          np.full(N, -1, dtype=np.int64) if failed is None else failed)


OBS = [("q", lambda S: S[..., 0]), ("p", lambda S: S[..., 1])]


class TestEstimateMoments:
    def test_identical_paths_zero_variance(self):
        states = np.tile(np.array([[1.0, 2.0], [3.0, 4.0]]), (10, 1, 1))
        summary = estimate_moments(fake_result(states), OBS)
        assert np.allclose(summary.covariances, 0.0)
        assert np.allclose(summary.means[:, 0], [1.0, 3.0])

    def test_standard_error_halves_when_n_quadruples(self):
        rng = np.random.default_rng(0)
        big = rng.standard_normal((4000, 1, 2))
        small = big[:1000]
        se_big = estimate_moments(fake_result(big), OBS).std_errors[0, 0]
        se_small = estimate_moments(fake_result(small), OBS).std_errors[0, 0]
        assert se_small / se_big == pytest.approx(2.0, rel=0.25)

    def test_split_half_consistency(self):
        rng = np.random.default_rng(1)
        states = rng.standard_normal((8000, 1, 2))
        full = estimate_moments(fake_result(states), OBS).std_errors[0, 0]
        half = estimate_moments(fake_result(states[:4000]), OBS).std_errors[0, 0]
        ratio = half / full
        assert np.sqrt(2.0) * 0.8 <= ratio <= np.sqrt(2.0) * 1.2

    def test_covariance_psd(self):
        rng = np.random.default_rng(2)
        states = rng.standard_normal((500, 3, 2))
        summary = estimate_moments(fake_result(states), OBS)
        for C in summary.covariances:
            assert np.linalg.eigvalsh(C).min() >= -1e-12

    def test_failed_paths_excluded(self):
        states = np.ones((10, 2, 2))
        states[0] = 100.0
        failed = np.full(10, -1, dtype=np.int64)
        failed[0] = 1
        summary = estimate_moments(fake_result(states, failed), OBS)
        assert summary.count == 9
        assert np.allclose(summary.means, 1.0)

    def test_empty_ensemble_rejected(self):
        with pytest.raises(ValueError):
            estimate_moments(fake_result(np.ones((1, 2, 2))), OBS)
        failed = np.zeros(5, dtype=np.int64)
        with pytest.raises(ValueError):
            estimate_moments(fake_result(np.ones((5, 2, 2)), failed), OBS)

    def test_times_off_grid_rejected(self):
        with pytest.raises(ValueError):
            estimate_moments(fake_result(np.ones((5, 3, 2))), OBS, times=[0.5])

    def test_moments_against_oracle_small_run(self):
        cfg = PulsePlasmaConfig(strength=0.1, tau=1.0)
        model = example1_model(cfg)
        res = integrate_ensemble(model, np.zeros(6), 5.0, 0.1,
                                 WienerDriver(3, 3), n_paths=3000,
                                 record_every=10, backend="python")
        summary = estimate_moments(res, [("v0", lambda S: S[..., 3])])
        expect = cfg.m0 ** 2 * 5.0 / 3.0
        ti = len(summary.times) - 1
        got = summary.covariances[ti, 0, 0]
        assert abs(got - expect) <= 3.0 * summary.var_std_errors[ti, 0]


class TestDispersion:
    def test_coincident_pairs_zero(self):
        cfg = PulsePlasmaConfig(strength=0.1, tau=1.0)
        model = example1_model(cfg)
        Z = np.tile(np.array([0.1, 0.0, 0.0, 0.2, 0.0, 0.0]), (64, 1))
        res = integrate_pairs_ensemble(model, Z, Z.copy(), 1.0, 0.05,
                                       WienerDriver(5, 3))
        disp = dispersion_curve(res)
        assert np.all(disp.mean_dx2 == 0.0)
        assert np.all(disp.mean_dv2 == 0.0)

    def test_pulse_pairs_velocity_separation_frozen(self):
        cfg = PulsePlasmaConfig(strength=0.1, tau=1.0)
        model = example1_model(cfg)
        rng = np.random.default_rng(6)
        ZA = rng.standard_normal((128, 6))
        ZB = rng.standard_normal((128, 6))
        res = integrate_pairs_ensemble(model, ZA, ZB, 2.0, 0.05,
                                       WienerDriver(7, 3), record_every=8)
        disp = dispersion_curve(res)
        assert np.max(np.abs(disp.mean_dv2 - disp.mean_dv2[0])) < 1e-12

    def test_counterexample_pairs_grow(self):
        from stochaccel import CounterexampleConfig, counterexample_model
        model = counterexample_model(CounterexampleConfig(
            base=PulsePlasmaConfig(strength=0.2, tau=1.0),
            phi_kind="linear", phi_vector=(1.0, 0.0, 0.0)))
        P = 1500
        ZA = np.zeros((P, 6))
        ZB = np.zeros((P, 6))
        ZB[:, 0] = 1.0
        res = integrate_pairs_ensemble(model, ZA, ZB, 3.0, 0.05,
                                       WienerDriver(8, 6), record_every=30)
        disp = dispersion_curve(res)
        grow = disp.mean_dv2[-1] - disp.mean_dv2[0]
        se = np.hypot(disp.se_dv2[-1], disp.se_dv2[0])
        assert grow > 5.0 * se


class TestWeakOrderFit:
    def test_exact_linear_scaling(self):
        hs = [0.1, 0.05, 0.025, 0.0125]
        fit = weak_order_fit(hs, [0.7 * h for h in hs])
        assert fit.slope == pytest.approx(1.0, abs=1e-6)
        assert fit.ci_halfwidth < 1e-6

    def test_exact_quadratic_scaling(self):
        hs = [0.2, 0.1, 0.05]
        fit = weak_order_fit(hs, [3.0 * h * h for h in hs])
        assert fit.slope == pytest.approx(2.0, abs=1e-9)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            weak_order_fit([0.1, 0.05], [1.0, 0.5])
        with pytest.raises(ValueError):
            weak_order_fit([0.1, 0.05, 0.02], [1.0, -0.5, 0.2])
        with pytest.raises(ValueError):
            weak_order_fit([0.1, -0.05, 0.02], [1.0, 0.5, 0.2])


class TestBatchSE:
    def test_matches_sqrt_n_scaling_for_iid(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal(10000)
        se = batch_se(x)
        assert se == pytest.approx(1.0 / np.sqrt(10000), rel=0.2)

    def test_small_samples_nan(self):
        assert np.isnan(batch_se(np.ones(3)))
