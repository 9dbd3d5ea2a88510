import math

import numpy as np
import pytest

from stochaccel import (
    CounterexampleConfig,
    DomainError,
    KarneyConfig,
    PulsePlasmaConfig,
    bessel_j,
    counterexample_model,
    cross_diffusion,
    example1_micro_ensemble,
    example1_micro_run,
    example1_model,
    example2_micro_ensemble,
    example2_micro_run,
    example2_model,
    generator_coefficients,
    karney_s2_secular,
)
from stochaccel.models import (
    karney_first_jprime_zero,
    pulse_directions,
)


class TestPulseConfig:
    def test_uniform_window_moments(self):
        cfg = PulsePlasmaConfig(strength=0.4, tau=2.5)
        assert cfg.m0 == pytest.approx(0.4, abs=1e-14)
        assert cfg.m1 == pytest.approx(0.4 * 1.25, abs=1e-12)

    def test_moment_quadrature_invariant(self):
        # stored moments reproduced by an independent node count to 1e-10
        for window, center in (("uniform", 0.5), ("bump", 0.5), ("bump", 0.35)):
            cfg = PulsePlasmaConfig(strength=0.7, tau=1.2, window=window,
                                    window_center=center)
            m0, m1 = cfg.window_moments(512)
            assert cfg.strength * m0 == pytest.approx(cfg.m0, abs=1e-10)
            assert cfg.strength * m1 == pytest.approx(cfg.m1, abs=1e-10)

    def test_unnormalized_window_scales_m0(self):
        a = PulsePlasmaConfig(strength=1.0, window="bump", normalize_window=True)
        b = PulsePlasmaConfig(strength=1.0, window="bump", normalize_window=False)
        assert a.m0 == pytest.approx(1.0, abs=1e-12)
        assert b.m0 != pytest.approx(1.0, abs=1e-3)
        # the moment ratio is window-shape dependent only through centering
        assert a.m1 / a.m0 == pytest.approx(b.m1 / b.m0, abs=1e-12)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            PulsePlasmaConfig(tau=-1.0)
        with pytest.raises(ValueError):
            PulsePlasmaConfig(window="bump", window_center=1.5)
        with pytest.raises(ValueError):
            PulsePlasmaConfig(window="sawtooth")


class TestPulseMicro:
    def test_zero_pulses_ballistic(self):
        cfg = PulsePlasmaConfig(strength=0.2, tau=1.0)
        z0 = np.array([0.0, 1.0, 0.0, 0.5, -0.5, 0.2])
        out = example1_micro_run(cfg, z0, 0, seed=1)
        assert out.shape == (1, 6)
        assert np.array_equal(out[0], z0)

    def test_single_pulse_kick_matches_force_integration(self):
        # RK4 oracle for the true windowed force over one interval confirms
        # the exact-map updates dv = -m0 z and the -m1 z displacement
        cfg = PulsePlasmaConfig(strength=0.3, tau=1.4, window="bump",
                                window_center=0.45)
        z0 = np.array([0.1, -0.2, 0.3, 0.5, 0.0, -0.1])
        out = example1_micro_run(cfg, z0, 1, seed=7, sample_id=5)
        d = pulse_directions(7, [5], 0)[0]

        steps = 4000
        h = cfg.tau / steps
        x, v = z0[:3].copy(), z0[3:].copy()
        t = 0.0

        def acc(tt):
            return -cfg.strength * cfg.window_value(tt) * d

        for _ in range(steps):
            k1x, k1v = v, acc(t)
            k2x, k2v = v + 0.5 * h * k1v, acc(t + 0.5 * h)
            k3x, k3v = v + 0.5 * h * k2v, acc(t + 0.5 * h)
            k4x, k4v = v + h * k3v, acc(t + h)
            x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
            v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
            t += h
        assert np.max(np.abs(out[1, :3] - x)) < 1e-10
        assert np.max(np.abs(out[1, 3:] - v)) < 1e-10
        assert np.allclose(out[1, 3:] - z0[3:], -cfg.m0 * d, atol=1e-12)

    def test_energy_change_equals_impulse_work(self):
        cfg = PulsePlasmaConfig(strength=0.25, tau=1.0)
        z0 = np.array([0.0, 0.0, 0.0, 0.3, -0.7, 0.2])
        out = example1_micro_run(cfg, z0, 1, seed=3)
        d = pulse_directions(3, [0], 0)[0]
        dE = 0.5 * np.sum(out[1, 3:] ** 2) - 0.5 * np.sum(z0[3:] ** 2)
        work = -cfg.m0 * np.dot(d, z0[3:]) + 0.5 * cfg.m0 ** 2
        assert dE == pytest.approx(work, abs=1e-14)

    def test_ensemble_velocity_variance(self):
        cfg = PulsePlasmaConfig(strength=0.1, tau=1.0)
        N, P = 4000, 60
        final = example1_micro_ensemble(cfg, np.zeros(6), N, P, seed=11)
        var = final[:, 3:].var(axis=0)
        expect = P * cfg.m0 ** 2 / 3.0
        se = expect * math.sqrt(2.0 / N)
        assert np.all(np.abs(var - expect) < 3.0 * se)

    def test_direction_moments_on_sphere(self):
        d = pulse_directions(5, np.arange(20000), 3)
        assert np.allclose(np.sum(d * d, axis=1), 1.0)
        second = d.T @ d / d.shape[0]
        se = 3.0 * math.sqrt(4.0 / 45.0 / d.shape[0])
        assert np.max(np.abs(second - np.eye(3) / 3.0)) < 3 * se + 1e-3

    def test_single_run_matches_ensemble_row(self):
        cfg = PulsePlasmaConfig(strength=0.2, tau=1.0)
        z0 = np.array([0.1, 0.0, -0.2, 0.4, 0.1, 0.0])
        traj = example1_micro_run(cfg, z0, 10, seed=9, sample_id=4)
        final = example1_micro_ensemble(cfg, z0, 6, 10, seed=9)
        assert np.allclose(traj[-1], final[4], atol=1e-15)


class TestPulseModel:
    def test_noise_coefficients_and_generators(self):
        cfg = PulsePlasmaConfig(strength=0.3, tau=2.0)
        model = example1_model(cfg)
        s = math.sqrt(3.0 * cfg.tau)
        z = np.array([0.2, -0.6, 0.1, 0.9, 0.4, -0.2])
        for i, b in enumerate(model.noise_fields):
            vec = b.eval(z)
            assert vec[i] == pytest.approx(cfg.m1 / s, abs=1e-15)
            assert vec[3 + i] == pytest.approx(cfg.m0 / s, abs=1e-15)
            assert np.sum(np.abs(vec)) == pytest.approx((cfg.m0 + cfg.m1) / s,
                                                        abs=1e-15)
            # generating Hamiltonian is e_i . (m1 v - m0 x)/sqrt(3), per tau
            g = b.generator.gradient(z) * math.sqrt(cfg.tau)
            assert g[i] == pytest.approx(-cfg.m0 / math.sqrt(3.0), abs=1e-15)
            assert g[3 + i] == pytest.approx(cfg.m1 / math.sqrt(3.0), abs=1e-15)

    def test_zero_strength_is_ballistic(self):
        model = example1_model(PulsePlasmaConfig(strength=0.0))
        z = np.array([0.1, 0.2, 0.3, 1.0, 2.0, 3.0])
        for b in model.noise_fields:
            assert np.all(b.eval(z) == 0.0)
        assert np.allclose(model.drift.eval(z), [1.0, 2.0, 3.0, 0, 0, 0])


class TestCounterexample:
    def base(self):
        return PulsePlasmaConfig(strength=0.2, tau=1.0)

    def test_zero_phase_reduces_to_pulse_model(self):
        model = counterexample_model(CounterexampleConfig(base=self.base(),
                                                          phi_kind="zero"))
        ref = example1_model(self.base())
        rng = np.random.default_rng(1)
        z = rng.standard_normal((20, 6))
        pairs_z2 = rng.standard_normal((20, 6))
        assert np.max(np.abs(cross_diffusion(model, z, pairs_z2)
                             - cross_diffusion(ref, z, pairs_z2))) < 1e-15

    def test_constant_phase_same_generator(self):
        model = counterexample_model(CounterexampleConfig(
            base=self.base(), phi_kind="constant", phi_value=np.pi / 3))
        ref = example1_model(self.base())
        rng = np.random.default_rng(2)
        z = rng.standard_normal((20, 6))
        z2 = rng.standard_normal((20, 6))
        gm = generator_coefficients(model)
        gr = generator_coefficients(ref)
        assert np.max(np.abs(gm.ito_drift(z) - gr.ito_drift(z))) < 1e-14
        assert np.max(np.abs(gm.diffusion(z) - gr.diffusion(z))) < 1e-14
        # a global rotation also leaves the two-point tensor invariant
        assert np.max(np.abs(cross_diffusion(model, z, z2)
                             - cross_diffusion(ref, z, z2))) < 1e-14

    def test_linear_phase_one_particle_match_two_particle_mismatch(self):
        model = counterexample_model(CounterexampleConfig(
            base=self.base(), phi_kind="linear", phi_vector=(1.0, 0.0, 0.0)))
        ref = example1_model(self.base())
        rng = np.random.default_rng(3)
        z = rng.standard_normal((50, 6))
        gm = generator_coefficients(model)
        gr = generator_coefficients(ref)
        assert np.max(np.abs(gm.diffusion(z) - gr.diffusion(z))) < 1e-14
        assert np.max(np.abs(gm.ito_drift(z) - gr.ito_drift(z))) < 1e-12
        z1 = np.zeros(6)
        z2 = np.zeros(6)
        z2[0] = 1.3
        got = cross_diffusion(model, z1, z2)
        want = cross_diffusion(ref, z1, z2)
        assert np.linalg.norm(got - want) / np.linalg.norm(want) > 0.1

    def test_custom_phase_requires_field(self):
        with pytest.raises(ValueError):
            counterexample_model(CounterexampleConfig(base=self.base(),
                                                      phi_kind="custom"))


class TestKarneyConfig:
    def test_delta_validation(self):
        with pytest.raises(ValueError):
            KarneyConfig(eps=0.05, n0=6, delta=0.7)
        with pytest.raises(ValueError):
            KarneyConfig(eps=0.05, n0=6, delta=0.0)
        with pytest.raises(ValueError):
            KarneyConfig(eps=0.05, n0=0, delta=0.1)

    def test_default_domain(self):
        cfg = KarneyConfig(eps=0.02, n0=30, delta=0.05)
        assert cfg.i_max == pytest.approx(0.5 * 55.0 ** 2)
        assert cfg.tau == pytest.approx(2 * math.pi)

    def test_first_maximum_of_bessel(self):
        u = karney_first_jprime_zero(30)
        assert 30 < u < 35
        assert abs(bessel_j(30, u, derivative=True)) < 1e-12


class TestKarneyMicro:
    def test_zero_amplitude_conserves_action(self):
        cfg = KarneyConfig(eps=0.0, n0=6, delta=0.05, i_max=80.0)
        out = example2_micro_run(cfg, np.array([0.5, 10.0]), 1000, seed=3,
                                 steps_per_period=32)
        assert np.max(np.abs(out[:, 1] - 10.0)) < 1e-12

    def test_small_amplitude_matches_linearized_kick(self):
        # first-order kick: dI ~ eps * integral of the unperturbed-orbit
        # force; the residual shrinks like eps^2
        cfg_template = dict(n0=6, delta=0.05, i_max=80.0)
        z0 = np.array([0.7, 24.5])
        seed = 13

        def linearized_kick(eps):
            eta = 2.0 * np.pi * float(
                __import__("stochaccel._rng", fromlist=["uniforms"]).uniforms(
                    seed, 0x0E7A0002, np.uint64(0), np.uint64(0)))
            s = np.linspace(0.0, 2 * np.pi, 20001)
            u = math.sqrt(2 * z0[1])
            theta = z0[0] + s
            nu = 6 + 0.05
            integrand = np.cos(u * np.sin(theta) - nu * s - eta) * u * np.cos(theta)
            return eps * np.trapezoid(integrand, s)

        resids = []
        for eps in (1e-3, 2e-3):
            cfg = KarneyConfig(eps=eps, **cfg_template)
            out = example2_micro_run(cfg, z0, 1, seed=seed, steps_per_period=512)
            dI = out[1, 1] - z0[1]
            resids.append(abs(dI - linearized_kick(eps)))
        # doubling eps quadruples the residual (second-order remainder)
        assert resids[1] / resids[0] == pytest.approx(4.0, rel=0.2)

    def test_domain_error_carries_period(self):
        cfg = KarneyConfig(eps=2.0, n0=2, delta=0.05, i_min=0.45, i_max=10.0)
        with pytest.raises(DomainError) as err:
            example2_micro_run(cfg, np.array([0.0, 0.5]), 200, seed=5,
                               steps_per_period=64)
        assert err.value.period == 23

    def test_initial_action_below_floor_rejected(self):
        cfg = KarneyConfig(eps=0.1, n0=6, delta=0.05)
        with pytest.raises(DomainError):
            example2_micro_run(cfg, np.array([0.0, 1e-5]), 1, seed=1)

    def test_single_run_matches_ensemble_row(self):
        cfg = KarneyConfig(eps=0.05, n0=6, delta=0.05, i_max=80.0)
        traj = example2_micro_run(cfg, np.array([0.3, 20.0]), 5, seed=8,
                                  steps_per_period=64)
        rec, failed = example2_micro_ensemble(
            cfg, np.array([[0.3, 20.0], [1.0, 25.0]]), 5, seed=8,
            steps_per_period=64, backend="python")
        assert failed[0] == -1
        assert np.allclose(rec[0], traj, atol=1e-15)

    def test_ensemble_variance_matches_diffusion(self):
        # moderate-harmonic version of the micro-vs-model variance check
        cfg = KarneyConfig(eps=0.05, n0=6, delta=0.05, i_max=200.0)
        u0 = karney_first_jprime_zero(6)
        I0 = 0.5 * u0 * u0
        rng = np.random.default_rng(0)
        Z0 = np.stack([2 * np.pi * rng.random(3000), np.full(3000, I0)], axis=1)
        periods = 40
        rec, failed = example2_micro_ensemble(cfg, Z0, periods, seed=21,
                                              steps_per_period=256)
        assert np.all(failed < 0)
        dI2 = (rec[:, -1, 1] - I0) ** 2
        J = float(bessel_j(6, u0))
        D = 0.5 * cfg.eps ** 2 * math.pi * float(np.sinc(cfg.delta)) ** 2 * 36 * J * J
        expect = 2.0 * D * (2 * math.pi * periods)
        se = float(np.std(dI2, ddof=1) / math.sqrt(len(dI2)))
        assert abs(float(dI2.mean()) - expect) <= 0.10 * expect + 3.0 * se


class TestKarneyModel:
    def test_action_noise_coefficient(self):
        cfg = KarneyConfig(eps=0.04, n0=6, delta=0.2, i_max=80.0)
        model = example2_model(cfg)
        z = np.array([0.9, 24.5])
        u = math.sqrt(49.0)
        J = float(bessel_j(6, u))
        c = cfg.eps * math.sqrt(math.pi) * float(np.sinc(cfg.delta)) * 6 * J
        b1 = model.noise_fields[0].eval(z)
        b2 = model.noise_fields[1].eval(z)
        assert b1[1] == pytest.approx(c * math.sin(6 * 0.9), rel=1e-12)
        assert b2[1] == pytest.approx(-c * math.cos(6 * 0.9), rel=1e-12)

    def test_tiny_detuning_sinc_is_one(self):
        cfg = KarneyConfig(eps=0.04, n0=6, delta=1e-12, i_max=80.0)
        model = example2_model(cfg)
        z = np.array([0.0, 24.5])
        b2 = model.noise_fields[1].eval(z)
        J = float(bessel_j(6, math.sqrt(49.0)))
        assert b2[1] == pytest.approx(-cfg.eps * math.sqrt(math.pi) * 6 * J,
                                      rel=1e-9)

    def test_zero_amplitude_pure_rotation(self):
        cfg = KarneyConfig(eps=0.0, n0=6, delta=0.05, i_max=80.0)
        model = example2_model(cfg)
        z = np.array([0.3, 20.0])
        assert np.allclose(model.drift.eval(z), [1.0, 0.0])
        for b in model.noise_fields:
            assert np.all(b.eval(z) == 0.0)

    def test_secular_series_window_covers_turning_point(self):
        # truncating at the spec'd fixed offset around n0 would miss the
        # large negative orders; the config window must not
        cfg = KarneyConfig(eps=1.0, n0=30, delta=0.05)
        I = np.array([0.5 * 32.5 ** 2])
        full = karney_s2_secular(cfg, I)[0]
        assert full == pytest.approx(-0.06825946, abs=2e-6)

    def test_out_of_domain_evaluations_are_nan(self):
        cfg = KarneyConfig(eps=0.05, n0=6, delta=0.05, i_min=1.0, i_max=50.0)
        model = example2_model(cfg)
        z = np.array([[0.1, 0.5], [0.1, 20.0], [0.1, 80.0]])
        vals = model.noise_fields[0].eval(z)
        assert np.isnan(vals[0]).all()
        assert np.isfinite(vals[1]).all()
        assert np.isnan(vals[2]).all()
