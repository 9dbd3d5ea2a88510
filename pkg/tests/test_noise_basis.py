import numpy as np
import pytest

from stochaccel import (
    BasisRankError,
    KarneyConfig,
    KarneyPerturbation,
    PulsePerturbation,
    PulsePlasmaConfig,
    bessel_j,
    build_basis,
    compute_s1_ensemble,
    covariance,
    export_basis,
    hamiltonian_vector_field,
    load_basis,
    principal_angles,
    reconstruction_residual,
)
from stochaccel.models import action_hamiltonian, free_particle_hamiltonian
from stochaccel.noise_basis import SampleSet, covariance_pairs
from stochaccel.phase_space import LinearField, jmul


def box_probes(n=200, seed=0, halfwidth=1.0):
    rng = np.random.default_rng(seed)
    return halfwidth * (2.0 * rng.random((n, 6)) - 1.0)


_pulse_cache = {}


def pulse_samples(strength=0.1, tau=1.0, K=2000, seed=3, probes=None, first=0):
    key = (strength, tau, K, seed, first) if probes is None else None
    if key is not None and key in _pulse_cache:
        return _pulse_cache[key]
    cfg = PulsePlasmaConfig(strength=strength, tau=tau)
    proc = PulsePerturbation(cfg)
    bg = hamiltonian_vector_field(free_particle_hamiltonian())
    ens = compute_s1_ensemble(proc, bg, K, nodes=12, seed=seed, flow_steps=1,
                              first_index=first)
    pts = probes if probes is not None else box_probes()
    w = np.full(pts.shape[0], 1.0 / pts.shape[0])
    out = SampleSet.from_ensemble(ens, pts, w), cfg
    if key is not None:
        _pulse_cache[key] = out
    return out


def wave_samples(K=2000, seed=5, first=0, stratified=True):
    cfg = KarneyConfig(eps=0.05, n0=6, delta=0.05, i_max=80.0)
    proc = KarneyPerturbation(cfg, variant="single_harmonic", stratified=stratified)
    bg = hamiltonian_vector_field(action_hamiltonian())
    ens = compute_s1_ensemble(proc, bg, K, nodes=16, seed=seed, flow_steps=1,
                              first_index=first)
    th = 2 * np.pi * np.arange(24) / 24
    iv = np.linspace(17.0, 32.0, 12)
    pts = np.stack(np.meshgrid(th, iv, indexing="ij"), -1).reshape(-1, 2)
    w = np.full(pts.shape[0], 1.0 / pts.shape[0])
    return SampleSet.from_ensemble(ens, pts, w), cfg


class TestCovariance:
    def test_single_realization_outer_product(self):
        samples, _ = pulse_samples(K=2, seed=9)
        one = SampleSet(samples.fields[:1] * 2, samples.probe_points,
                        samples.probe_weights)
        # duplicated realization: covariance is exactly the outer product
        z1 = np.array([0.2, 0.1, -0.3, 0.5, 1.0, -0.2])
        z2 = np.array([1.0, 0.0, 0.0, -0.5, 0.3, 0.8])
        got = covariance(z1, z2, one)
        u1 = jmul(one.fields[0].gradient(z1))
        u2 = jmul(one.fields[0].gradient(z2))
        assert np.allclose(got, np.outer(u1, u2), atol=1e-15)

    def test_pulse_velocity_block_matches_sphere_moment(self):
        # E[z z^T] = I/3 over the unit sphere drives the velocity-velocity
        # block of the coincident-point covariance to (m0^2/3) I
        samples, cfg = pulse_samples(K=10000, seed=1)
        z = np.array([0.3, -0.2, 0.6, 0.1, 0.0, -0.4])
        got = covariance(z, z, samples)
        vv = got[3:, 3:]
        se = 3.0 * cfg.m0 ** 2 * np.sqrt(4.0 / 45.0 / 10000)
        assert np.max(np.abs(vv - (cfg.m0 ** 2 / 3.0) * np.eye(3))) < 3.0 * se

    def test_wave_action_component_closed_form(self):
        # I-I component at a point: 2 pi^2 sinc^2(pi delta) n0^2 J_n0^2
        samples, cfg = wave_samples(K=4000, seed=2)
        z = np.array([0.9, 24.5])
        got = covariance(z, z, samples)
        u = np.sqrt(49.0)
        expect = (2.0 * np.pi ** 2 * np.sinc(cfg.delta) ** 2 * cfg.n0 ** 2
                  * float(bessel_j(cfg.n0, u)) ** 2)
        assert got[1, 1] == pytest.approx(expect, rel=0.05)

    def test_swap_symmetry(self):
        samples, _ = pulse_samples(K=50, seed=4)
        z1 = np.array([0.2, 0.1, -0.3, 0.5, 1.0, -0.2])
        z2 = np.array([1.0, 0.0, 0.0, -0.5, 0.3, 0.8])
        assert np.allclose(covariance(z1, z2, samples),
                           covariance(z2, z1, samples).T, atol=1e-15)


class TestBuildBasis:
    def test_deterministic_sample_gives_rank_one(self):
        samples, cfg = pulse_samples(K=2, seed=9)
        rep = SampleSet([samples.fields[0]] * 8, samples.probe_points,
                        samples.probe_weights)
        basis = build_basis(rep)
        assert basis.numerical_rank == 1
        assert basis.rank == 1
        # the single mode is proportional to the sample
        pts = samples.probe_points[:10]
        mode_vals = basis.modes[0].value(pts)
        s_vals = samples.fields[0].value(pts)
        ratio = mode_vals / s_vals
        assert np.allclose(ratio, ratio[0], rtol=1e-10)

    def test_mode_fast_paths_match_stored_combinations(self):
        samples, _ = pulse_samples(K=60, seed=21)
        basis = build_basis(samples)
        pts = samples.probe_points[:6]
        direct_vals = np.stack([m.value(pts) for m in basis.modes])
        assert np.allclose(basis.mode_values(pts), direct_vals, rtol=1e-12)
        direct_vecs = np.stack([jmul(m.gradient(pts)) for m in basis.modes])
        assert np.allclose(basis.mode_vectors(pts), direct_vecs, rtol=1e-12)

    def test_pulse_basis_rank_and_span(self):
        samples, cfg = pulse_samples(K=2000, seed=3)
        basis = build_basis(samples)
        assert basis.numerical_rank == 3
        assert basis.rank == 3
        scale = 1.0 / np.sqrt(3.0)
        refs = []
        for i in range(3):
            a = np.zeros(6)
            a[i] = -cfg.m0 * scale
            a[3 + i] = cfg.m1 * scale
            refs.append(LinearField(a))
        angles = principal_angles(basis, refs)
        assert np.max(angles) < 0.05

    def test_wave_basis_rank_and_pair(self):
        samples, cfg = wave_samples(K=2000, seed=5)
        basis = build_basis(samples)
        assert basis.rank == 2
        # recovered pair matches the closed-form pair up to a 2x2 rotation
        pts = samples.probe_points
        u = np.sqrt(2.0 * pts[:, 1])
        amp = np.sqrt(2.0) * np.pi * np.sinc(cfg.delta) * bessel_j(cfg.n0, u)
        ref = np.stack([amp * np.cos(cfg.n0 * pts[:, 0]),
                        amp * np.sin(cfg.n0 * pts[:, 0])])
        got = basis.mode_values(pts)
        # best 2x2 orthogonal alignment (orthogonal Procrustes)
        M = got @ ref.T
        U, _, Vt = np.linalg.svd(M)
        R = U @ Vt
        aligned = R.T @ got
        resid = np.abs(aligned - ref) / np.max(np.abs(amp))
        assert np.max(resid) < 0.02

    def test_eigenvalue_sum_rule(self):
        samples, _ = pulse_samples(K=300, seed=6)
        basis = build_basis(samples)
        from stochaccel.noise_basis import _gram_matrix
        tr = np.trace(_gram_matrix(samples))
        assert np.sum(basis.all_eigenvalues) == pytest.approx(tr, rel=1e-12)

    def test_unit_mode_orthonormality(self):
        samples, _ = pulse_samples(K=500, seed=7)
        basis = build_basis(samples)
        pts = samples.probe_points
        w = samples.probe_weights
        vecs = basis.mode_vectors(pts) / np.sqrt(basis.eigenvalues)[:, None, None]
        direct = np.stack([jmul(m.gradient(pts[:4])) for m in basis.unit_modes()])
        assert np.allclose(vecs[:, :4], direct, rtol=1e-12)
        gram = np.einsum("ami,bmi,m->ab", vecs, vecs, w)
        assert np.max(np.abs(gram - np.eye(basis.rank))) < 1e-10

    def test_fresh_coefficients_unit_variance(self):
        samples, _ = pulse_samples(K=2000, seed=3)
        basis = build_basis(samples)
        fresh, _ = pulse_samples(K=1500, seed=8, first=5_000_000)
        xi = basis.coefficient_samples(fresh)
        K_test = xi.shape[1]
        second = xi @ xi.T / K_test
        assert np.max(np.abs(second - np.eye(basis.rank))) < 5.0 / np.sqrt(K_test)

    def test_rank_above_numerical_rank_raises(self):
        samples, _ = pulse_samples(K=100, seed=9)
        with pytest.raises(BasisRankError):
            build_basis(samples, rank=4)  # pulse kicks span exactly 3 modes

    def test_probe_grid_smaller_than_modes_raises(self):
        samples, _ = pulse_samples(K=50, seed=10, probes=box_probes(2, seed=1))
        with pytest.raises(ValueError):
            build_basis(samples, rank=3)


class TestReconstruction:
    def test_in_sample_identity_at_full_rank(self):
        samples, _ = pulse_samples(K=200, seed=11)
        basis = build_basis(samples)  # keeps all numerically nonzero modes
        pts = box_probes(40, seed=12)
        pairs = list(zip(pts[:20], pts[20:]))
        assert reconstruction_residual(basis, samples, pairs) < 1e-10

    def test_held_out_residual_small(self):
        samples, _ = pulse_samples(K=2000, seed=3)
        basis = build_basis(samples)
        holdout, _ = pulse_samples(K=10000, seed=13, first=9_000_000)
        pts = box_probes(100, seed=14)
        pairs = list(zip(pts[:50], pts[50:]))
        assert reconstruction_residual(basis, holdout, pairs) <= 0.05

    def test_rank_one_residual_matches_eigenvalue_bookkeeping(self):
        # dropping two of three nearly equal modes: the dropped-tensor norm
        # over the alpha norm is sqrt(2/3) for equal eigenvalues (the
        # dropped energy fraction is 2/3)
        samples, _ = pulse_samples(K=2000, seed=15)
        basis1 = build_basis(samples, rank=1)
        pts = box_probes(30, seed=16)
        pairs = list(zip(pts[:15], pts[15:]))
        resid = reconstruction_residual(basis1, samples, pairs)
        lam = build_basis(samples).eigenvalues
        energy_dropped = np.sum(lam[1:]) / np.sum(lam)
        assert energy_dropped == pytest.approx(2.0 / 3.0, abs=0.05)
        assert resid == pytest.approx(np.sqrt(2.0 / 3.0), abs=0.05)


class TestExportImport:
    def test_roundtrip_reconstructs_modes_exactly(self, tmp_path):
        from stochaccel.models import (
            KarneyConfig as KC,
            KarneyPerturbation as KP,
        )

        samples, cfg = wave_samples(K=200, seed=17)
        basis = build_basis(samples)
        problem = {"kind": "example2", "eps": cfg.eps, "n0": cfg.n0,
                   "delta": cfg.delta, "i_min": cfg.i_min, "i_max": cfg.i_max,
                   "series_margin": cfg.series_margin}
        path = tmp_path / "basis.json"
        export_basis(basis, path, problem)

        def process_factory(blk):
            c = KC(eps=blk["eps"], n0=blk["n0"], delta=blk["delta"],
                   i_min=blk["i_min"], i_max=blk["i_max"],
                   series_margin=blk["series_margin"])
            return KP(c, variant="single_harmonic", stratified=True)

        def background_factory(blk):
            return hamiltonian_vector_field(action_hamiltonian())

        loaded = load_basis(path, process_factory, background_factory)
        assert np.allclose(loaded.eigenvalues, basis.eigenvalues, rtol=1e-15)
        pts = samples.probe_points[:8]
        assert np.allclose(basis.mode_values(pts), loaded.mode_values(pts),
                           rtol=1e-12)

    def test_sampleset_validation(self):
        pts = box_probes(5)
        with pytest.raises(ValueError):
            SampleSet([LinearField(np.ones(6))], pts, np.full(5, 0.2))
        with pytest.raises(ValueError):
            SampleSet([LinearField(np.ones(6))] * 3, pts, np.full(4, 0.2))
        with pytest.raises(ValueError):
            SampleSet([LinearField(np.ones(6))] * 3, pts, -np.ones(5))
