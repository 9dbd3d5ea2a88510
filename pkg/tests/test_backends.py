"""Compiled kernels against the pure-numpy implementations.

The two backends share all random inputs (increments and phases are
generated once on the numpy side), so trajectories agree to roundoff; the
micro integrator agrees bitwise because its arithmetic is identical."""
import numpy as np
import pytest

from stochaccel import (
    KarneyConfig,
    WienerDriver,
    example2_micro_ensemble,
    example2_model,
    integrate_ensemble,
)
from stochaccel._backend import available

pytestmark = pytest.mark.skipif(not available(),
                                reason="compiled kernels not built")


def wave_model():
    return example2_model(KarneyConfig(eps=0.05, n0=6, delta=0.05, i_max=80.0))


class TestMicroKernel:
    def test_bitwise_agreement_with_numpy(self):
        cfg = KarneyConfig(eps=0.03, n0=6, delta=0.05, i_max=80.0)
        rng = np.random.default_rng(1)
        Z0 = np.stack([2 * np.pi * rng.random(64), rng.uniform(15, 30, 64)], axis=1)
        rp, fp = example2_micro_ensemble(cfg, Z0, 12, seed=9,
                                         steps_per_period=128, backend="python")
        rc, fc = example2_micro_ensemble(cfg, Z0, 12, seed=9,
                                         steps_per_period=128, backend="compiled")
        assert np.array_equal(rp, rc)
        assert np.array_equal(fp, fc)

    def test_failure_flags_agree(self):
        cfg = KarneyConfig(eps=2.0, n0=2, delta=0.05, i_min=0.45, i_max=10.0)
        Z0 = np.tile(np.array([0.0, 0.5]), (16, 1))
        rp, fp = example2_micro_ensemble(cfg, Z0, 60, seed=5,
                                         steps_per_period=64, backend="python")
        rc, fc = example2_micro_ensemble(cfg, Z0, 60, seed=5,
                                         steps_per_period=64, backend="compiled")
        assert np.array_equal(fp, fc)
        assert fp.max() >= 0
        assert np.array_equal(rp, rc)


class TestSdeKernel:
    @pytest.mark.parametrize("scheme", ["euler_heun", "midpoint"])
    def test_close_agreement_with_numpy(self, scheme):
        model = wave_model()
        driver = WienerDriver(11, 2)
        z0 = np.array([0.4, 22.0])
        kw = dict(record_every=50, n_paths=48, scheme=scheme)
        rp = integrate_ensemble(model, z0, 6.0, 0.01, driver, backend="python", **kw)
        rc = integrate_ensemble(model, z0, 6.0, 0.01, driver, backend="compiled", **kw)
        assert rp.meta["backend"] == "python"
        assert rc.meta["backend"] == "compiled"
        # the backends order a couple of reductions differently; agreement
        # is to accumulated roundoff, not bitwise
        assert np.max(np.abs(rp.states - rc.states)) < 1e-9
        assert np.array_equal(rp.failed_step, rc.failed_step)

    def test_backend_env_override(self, monkeypatch):
        from stochaccel import _backend
        monkeypatch.setenv("STOCHACCEL_BACKEND", "python")
        assert _backend.resolve("auto") == "python"
        monkeypatch.setenv("STOCHACCEL_BACKEND", "compiled")
        assert _backend.resolve("auto") == "compiled"
        monkeypatch.delenv("STOCHACCEL_BACKEND")
        assert _backend.resolve("auto") == "compiled"
        with pytest.raises(ValueError):
            _backend.resolve("sparkly")

    def test_kernel_respects_domain_guard(self):
        cfg = KarneyConfig(eps=0.5, n0=5, delta=0.05, i_min=1.45, i_max=1.55)
        model = example2_model(cfg)
        driver = WienerDriver(2, 2)
        rp = integrate_ensemble(model, np.array([0.0, 1.5]), 2.0, 0.05, driver,
                                n_paths=64, backend="python")
        rc = integrate_ensemble(model, np.array([0.0, 1.5]), 2.0, 0.05, driver,
                                n_paths=64, backend="compiled")
        assert rp.n_failed > 0
        assert np.array_equal(rp.failed_step, rc.failed_step)

    def test_threads_identical_results_compiled(self):
        model = wave_model()
        driver = WienerDriver(13, 2)
        a = integrate_ensemble(model, np.array([0.2, 20.0]), 1.0, 0.01, driver,
                               n_paths=40, threads=1, backend="compiled")
        b = integrate_ensemble(model, np.array([0.2, 20.0]), 1.0, 0.01, driver,
                               n_paths=40, threads=4, backend="compiled")
        assert np.array_equal(a.states, b.states)
