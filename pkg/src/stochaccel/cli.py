"""Experiment runner.

Reads a flat INI config, builds the requested model (analytically or via
the kick-sample / noise-basis pipeline), runs micro and macro ensembles,
and writes machine-readable results plus a verification report with one
line per check (oracle, estimate, standard error, verdict).

Exit status is 0 only when every check passes (checks marked expected-fail
count as passing when they fail) and at least 90% of paths integrate.

Output files (per subcommand, in the chosen directory):
    config_echo.ini   exact configuration the run used
    model.txt         model description (Hamiltonians, eigenvalues)
    report.txt        verification verdicts
    summary.csv       per-time ensemble moments
    paths.csv         per-step records of the first `store_paths` paths
                      (columns path_id, t, coord_0..coord_{2n-1})
    dispersion.csv    pair-separation curves (pair-dispersion runs)
    basis.json        exported noise basis (synthesized/build-basis runs)
    eigenvalues.txt   Gram spectrum (build-basis runs)
    failures.csv      per-path integration failures, when any

Results are bitwise identical for a fixed (config, seed) regardless of
--threads.
"""
from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import _backend, _rng
from .fokker_planck import (
    Example1Moments,
    cross_diffusion,
    cross_diffusion_residual,
    drift_divergence,
    example1_moment_odes,
    generator_coefficients,
)
from .kicks import compute_s1_ensemble
from .models import (
    CounterexampleConfig,
    KarneyConfig,
    KarneyPerturbation,
    PulsePerturbation,
    PulsePlasmaConfig,
    action_hamiltonian,
    benchmark_exact_mean,
    counterexample_model,
    example1_micro_ensemble,
    example1_model,
    example2_micro_ensemble,
    example2_model,
    free_particle_hamiltonian,
    karney_first_jprime_zero,
    scalar_benchmark_model,
    synthesized_model,
)
from .noise_basis import (
    SampleSet,
    build_basis,
    export_basis,
    reconstruction_residual,
)
from .phase_space import hamiltonian_vector_field
from .sde import WienerDriver, integrate_ensemble, integrate_pairs_ensemble
from .stats import dispersion_curve, estimate_moments, weak_order_fit

_PROBE_TAG = 0x9806E001
_PAIR_TAG = 0x9806E002

PROBLEMS = ("example1", "example2", "counterexample")


class ConfigError(ValueError):
    pass


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS = {
    "experiment": {"problem": "example1", "pipeline": "analytic", "seed": "12345",
                   "threads": "1", "out": ""},
    "example1": {"strength": "0.1", "tau": "1.0", "window": "uniform",
                 "window_center": "0.5", "window_halfwidth": "0.25",
                 "normalize_window": "true"},
    "example2": {"eps": "0.02", "n0": "30", "delta": "0.05", "i0": "",
                 "i_min": "1e-3", "i_max": "", "series_margin": "40",
                 "single_harmonic": "false", "steps_per_period": "512",
                 "periods": "50"},
    "counterexample": {"phi": "linear", "phi_value": "1.0471975511965976",
                       "phi_k": "1 0 0"},
    "sde": {"T": "10.0", "h": "0.02", "scheme": "euler_heun", "paths": "2000",
            "record_every": "10", "backend": "auto", "store_paths": "20",
            "midpoint_tol": "1e-12", "midpoint_max_iter": "50"},
    "basis": {"samples": "2000", "holdout": "10000", "nodes": "16",
              "rank": "", "energy": "0.999", "probes": "256",
              "box_halfwidth": "1.0", "n_theta": "24", "n_i": "12",
              "i_lo": "", "i_hi": ""},
    "verify": {"pairs": "1000", "pair_T": "", "include_micro": "false",
               "micro_samples": "2000", "probes": "100",
               "weak_h": "0.1 0.05 0.025 0.0125", "weak_paths": "200000",
               "weak_a": "0.4", "weak_b": "0.8", "weak_T": "1.0"},
}


@dataclass
class Experiment:
    """Parsed configuration; `raw` keeps the fully-defaulted INI for echo."""

    problem: str
    pipeline: str
    seed: int
    threads: int
    out: str
    raw: configparser.ConfigParser

    def get(self, section, key, type_=str):
        val = self.raw.get(section, key)
        try:
            if type_ is bool:
                return val.strip().lower() in ("1", "true", "yes", "on")
            return type_(val)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {val!r}: {exc}") from None

    def floats(self, section, key):
        return [float(v) for v in self.raw.get(section, key).split()]


def load_config(path=None, overrides=None) -> Experiment:
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if path is not None:
        read = cp.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for sec in cp.sections():
            if sec not in DEFAULTS:
                raise ConfigError(f"unknown config section [{sec}]")
    for (sec, key), val in (overrides or {}).items():
        cp.set(sec, key, str(val))
    problem = cp.get("experiment", "problem")
    if problem not in PROBLEMS:
        raise ConfigError(f"[experiment] problem must be one of {PROBLEMS}, got {problem!r}")
    pipeline = cp.get("experiment", "pipeline")
    if pipeline not in ("analytic", "synthesized"):
        raise ConfigError("[experiment] pipeline must be 'analytic' or 'synthesized'")
    try:
        seed = int(cp.get("experiment", "seed"))
        threads = int(cp.get("experiment", "threads"))
    except ValueError as exc:
        raise ConfigError(f"[experiment] seed/threads: {exc}") from None
    return Experiment(problem, pipeline, seed, threads,
                      cp.get("experiment", "out"), cp)


def example1_config(exp: Experiment) -> PulsePlasmaConfig:
    try:
        return PulsePlasmaConfig(
            strength=exp.get("example1", "strength", float),
            tau=exp.get("example1", "tau", float),
            window=exp.get("example1", "window"),
            window_center=exp.get("example1", "window_center", float),
            window_halfwidth=exp.get("example1", "window_halfwidth", float),
            normalize_window=exp.get("example1", "normalize_window", bool))
    except ValueError as exc:
        raise ConfigError(f"[example1]: {exc}") from None


def example2_config(exp: Experiment) -> KarneyConfig:
    i_max = exp.raw.get("example2", "i_max").strip()
    try:
        return KarneyConfig(
            eps=exp.get("example2", "eps", float),
            n0=exp.get("example2", "n0", int),
            delta=exp.get("example2", "delta", float),
            i_min=exp.get("example2", "i_min", float),
            i_max=float(i_max) if i_max else None,
            series_margin=exp.get("example2", "series_margin", int))
    except ValueError as exc:
        raise ConfigError(f"[example2]: {exc} (need 0 < |delta| < 1/2)") from None


def example2_i0(exp: Experiment, cfg: KarneyConfig) -> float:
    raw = exp.raw.get("example2", "i0").strip()
    if raw:
        return float(raw)
    u = karney_first_jprime_zero(cfg.n0)
    return 0.5 * u * u


def counterexample_config(exp: Experiment) -> CounterexampleConfig:
    kind = exp.get("counterexample", "phi")
    return CounterexampleConfig(
        base=example1_config(exp), phi_kind=kind,
        phi_value=exp.get("counterexample", "phi_value", float),
        phi_vector=tuple(exp.floats("counterexample", "phi_k")))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    oracle: float
    estimate: float
    stderr: float
    passed: bool
    expected_fail: bool = False

    @property
    def verdict(self):
        if self.expected_fail:
            return "FAIL (expected)" if not self.passed else "PASS (unexpected)"
        return "PASS" if self.passed else "FAIL"

    @property
    def ok(self):
        return self.passed != self.expected_fail


@dataclass
class Report:
    checks: list = dc_field(default_factory=list)
    notes: list = dc_field(default_factory=list)

    def add(self, name, oracle, estimate, stderr, passed, expected_fail=False):
        self.checks.append(Check(name, float(oracle), float(estimate),
                                 float(stderr), bool(passed), expected_fail))

    def note(self, text):
        self.notes.append(text)

    @property
    def ok(self):
        return all(c.ok for c in self.checks)

    def render(self):
        lines = ["# stochaccel verification report",
                 "# columns: check | oracle | estimate | stderr | verdict"]
        for c in self.checks:
            lines.append(" | ".join([c.name, _fmt(c.oracle), _fmt(c.estimate),
                                     _fmt(c.stderr), c.verdict]))
        for n in self.notes:
            lines.append(f"# note: {n}")
        expected = sum(1 for c in self.checks if c.expected_fail)
        lines.append(f"overall | {'PASS' if self.ok else 'FAIL'} "
                     f"({len(self.checks)} checks, {expected} expected-fail)")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def _write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def write_config_echo(exp: Experiment, outdir: Path):
    buf = []
    for sec in exp.raw.sections():
        buf.append(f"[{sec}]")
        for k, v in exp.raw.items(sec):
            if (sec, k) == ("experiment", "threads"):
                continue  # execution knob; results never depend on it
            buf.append(f"{k} = {v}")
        buf.append("")
    _write(outdir / "config_echo.ini", "\n".join(buf))


def write_paths_csv(outdir: Path, result, path_ids, store: int):
    n = result.states.shape[2]
    header = "path_id,t," + ",".join(f"coord_{i}" for i in range(n))
    rows = [header]
    keep = min(store, result.states.shape[0])
    for p in range(keep):
        for ti, t in enumerate(result.times):
            coords = ",".join(_fmt(float(x)) for x in result.states[p, ti])
            rows.append(f"{int(path_ids[p])},{_fmt(float(t))},{coords}")
    _write(outdir / "paths.csv", "\n".join(rows) + "\n")


def write_summary_csv(outdir: Path, summary):
    cols = ["t"]
    for n in summary.names:
        cols += [f"mean_{n}", f"se_{n}", f"var_{n}", f"var_se_{n}"]
    rows = [",".join(cols)]
    for ti, t in enumerate(summary.times):
        vals = [_fmt(float(t))]
        for j in range(len(summary.names)):
            vals += [_fmt(float(summary.means[ti, j])),
                     _fmt(float(summary.std_errors[ti, j])),
                     _fmt(float(summary.covariances[ti, j, j])),
                     _fmt(float(summary.var_std_errors[ti, j]))]
        rows.append(",".join(vals))
    _write(outdir / "summary.csv", "\n".join(rows) + "\n")


def write_failures(outdir: Path, result, path_ids):
    bad = np.nonzero(result.failed_step >= 0)[0]
    if bad.size == 0:
        return
    rows = ["path_id,failed_step"]
    rows += [f"{int(path_ids[i])},{int(result.failed_step[i])}" for i in bad]
    _write(outdir / "failures.csv", "\n".join(rows) + "\n")


def describe_model(model, extra=""):
    lines = [f"model: {model.name}", f"dimension: {model.dim}",
             f"channels: {model.channels}",
             f"hamiltonian: {model.is_hamiltonian}"]
    if model.drift.generator is not None:
        lines.append(f"drift hamiltonian: {model.drift.generator.name or 'unnamed'}")
    for k, b in enumerate(model.noise_fields):
        gen = b.generator.name if b.generator is not None else "(raw field)"
        lines.append(f"noise[{k}]: {gen}")
    if extra:
        lines.append(extra)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# shared pipeline pieces
# ---------------------------------------------------------------------------

def _sde_params(exp):
    return dict(T=exp.get("sde", "T", float), h=exp.get("sde", "h", float),
                scheme=exp.get("sde", "scheme"), paths=exp.get("sde", "paths", int),
                record_every=exp.get("sde", "record_every", int),
                backend=exp.get("sde", "backend"),
                store=exp.get("sde", "store_paths", int),
                tol=exp.get("sde", "midpoint_tol", float),
                max_iter=exp.get("sde", "midpoint_max_iter", int))


def _probes_box(seed, count, dim, halfwidth):
    idx = np.arange(count, dtype=np.uint64)[:, None]
    cols = np.arange(dim, dtype=np.uint64)[None, :]
    u = _rng.uniforms(seed, _PROBE_TAG, idx, cols)
    return halfwidth * (2.0 * u - 1.0)


def _example1_sampleset(exp, cfg, seed, count, first_index=0):
    proc = PulsePerturbation(cfg)
    bg = hamiltonian_vector_field(free_particle_hamiltonian())
    ens = compute_s1_ensemble(proc, bg, count, exp.get("basis", "nodes", int),
                              seed=seed, flow_steps=1, first_index=first_index)
    m = exp.get("basis", "probes", int)
    pts = _probes_box(seed, m, 6, exp.get("basis", "box_halfwidth", float))
    return SampleSet.from_ensemble(ens, pts, np.full(m, 1.0 / m)), proc, bg


def _example2_sampleset(exp, cfg, seed, count, i0, first_index=0):
    # stratified phases: marginally uniform, far less sampling noise in the
    # phase harmonics than iid draws
    proc = KarneyPerturbation(cfg, variant="single_harmonic", stratified=True)
    bg = hamiltonian_vector_field(action_hamiltonian())
    ens = compute_s1_ensemble(proc, bg, count, exp.get("basis", "nodes", int),
                              seed=seed, flow_steps=1, first_index=first_index)
    i_lo = exp.raw.get("basis", "i_lo").strip()
    i_hi = exp.raw.get("basis", "i_hi").strip()
    lo = float(i_lo) if i_lo else 0.7 * i0
    hi = float(i_hi) if i_hi else 1.3 * i0
    nt = exp.get("basis", "n_theta", int)
    ni = exp.get("basis", "n_i", int)
    th = 2.0 * np.pi * np.arange(nt) / nt
    iv = np.linspace(lo, hi, ni)
    pts = np.stack(np.meshgrid(th, iv, indexing="ij"), axis=-1).reshape(-1, 2)
    m = pts.shape[0]
    return SampleSet.from_ensemble(ens, pts, np.full(m, 1.0 / m)), proc, bg


def _basis_rank(exp):
    raw = exp.raw.get("basis", "rank").strip()
    return int(raw) if raw else None


def _example2_pairs(exp, probe_points, count=50):
    """Same-angle pairs across the action grid: the covariance tensor there
    has a healthy scale (pairs with n0 dtheta near an odd quarter-turn make
    it nearly singular and the relative residual meaningless)."""
    nt = exp.get("basis", "n_theta", int)
    ni = exp.get("basis", "n_i", int)
    grid = probe_points.reshape(nt, ni, 2)
    pairs = []
    k = 0
    while len(pairs) < count:
        t = k % nt
        i = k % ni
        j = (k * 7 + 3) % ni
        pairs.append((grid[t, i], grid[t, j]))
        k += 1
    return pairs


def _problem_block(exp, cfg):
    if isinstance(cfg, PulsePlasmaConfig):
        return {"kind": "example1", "strength": cfg.strength, "tau": cfg.tau,
                "window": cfg.window, "window_center": cfg.window_center,
                "window_halfwidth": cfg.window_halfwidth,
                "normalize_window": cfg.normalize_window,
                "box_halfwidth": exp.get("basis", "box_halfwidth", float),
                "probes": exp.get("basis", "probes", int)}
    return {"kind": "example2", "eps": cfg.eps, "n0": cfg.n0, "delta": cfg.delta,
            "i_min": cfg.i_min, "i_max": cfg.i_max,
            "series_margin": cfg.series_margin}


def _ensemble_failures_ok(report, result, outdir, path_ids):
    write_failures(outdir, result, path_ids)
    frac = result.n_failed / result.states.shape[0]
    report.add("path_success_fraction", 0.9, 1.0 - frac, 0.0, frac <= 0.1)
    return frac <= 0.1


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def run_example1(exp: Experiment, outdir: Path) -> Report:
    report = Report()
    cfg = example1_config(exp)
    sde = _sde_params(exp)
    seed = exp.seed

    extra = ""
    if exp.pipeline == "synthesized":
        samples, proc, bg = _example1_sampleset(exp, cfg, seed,
                                                exp.get("basis", "samples", int))
        basis = build_basis(samples, rank=_basis_rank(exp),
                            energy=exp.get("basis", "energy", float))
        export_basis(basis, outdir / "basis.json", _problem_block(exp, cfg))
        holdout, _, _ = _example1_sampleset(exp, cfg, seed + 1,
                                            exp.get("basis", "holdout", int),
                                            first_index=10_000_000)
        pair_pts = _probes_box(seed + 2, 100, 6, exp.get("basis", "box_halfwidth", float))
        pairs = list(zip(pair_pts[:50], pair_pts[50:]))
        resid = reconstruction_residual(basis, holdout, pairs)
        report.add("basis_rank", 3, basis.rank, 0.0, basis.rank == 3)
        report.add("basis_reconstruction_residual", 0.05, resid, 0.0, resid <= 0.05)
        model = synthesized_model(basis, free_particle_hamiltonian(), 1.0, cfg.tau)
        extra = f"eigenvalues: {[float(v) for v in basis.eigenvalues]}"
    else:
        model = example1_model(cfg)

    _write(outdir / "model.txt", describe_model(model, extra))

    driver = WienerDriver(seed, model.channels)
    z0 = np.zeros(6)
    ids = np.arange(sde["paths"])
    result = integrate_ensemble(model, z0, sde["T"], sde["h"], driver, ids,
                                scheme=sde["scheme"], record_every=sde["record_every"],
                                threads=exp.threads, backend=sde["backend"],
                                tol=sde["tol"], max_iter=sde["max_iter"])
    _ensemble_failures_ok(report, result, outdir, ids)

    obs = [(f"v_{i}", (lambda i: (lambda S: S[..., 3 + i]))(i)) for i in range(3)]
    obs += [(f"x_{i}", (lambda i: (lambda S: S[..., i]))(i)) for i in range(3)]
    summary = estimate_moments(result, obs)
    write_summary_csv(outdir, summary)
    write_paths_csv(outdir, result, ids, sde["store"])

    oracle = example1_moment_odes(cfg.m0, cfg.m1, cfg.tau,
                                  Example1Moments.point(z0), sde["T"])
    ti = len(summary.times) - 1
    for i in range(3):
        est = summary.covariances[ti, i, i]
        se = summary.var_std_errors[ti, i]
        report.add(f"var_v_{i}", oracle.var_v[i], est, se,
                   abs(est - oracle.var_v[i]) <= 3.0 * se)
    for i in range(3):
        est = summary.covariances[ti, 3 + i, 3 + i]
        se = summary.var_std_errors[ti, 3 + i]
        report.add(f"var_x_{i}", oracle.var_x[i], est, se,
                   abs(est - oracle.var_x[i]) <= 3.0 * se)
    for i in range(3):
        vals_v = result.states[result.ok, ti, 3 + i]
        vals_x = result.states[result.ok, ti, i]
        prod = (vals_x - vals_x.mean()) * (vals_v - vals_v.mean())
        est = prod.sum() / (prod.size - 1)
        se = float(np.std(prod, ddof=1) / np.sqrt(prod.size))
        report.add(f"cov_xv_{i}", oracle.cov_xv[i], est, se,
                   abs(est - oracle.cov_xv[i]) <= 3.0 * se)
    return report


def run_example2(exp: Experiment, outdir: Path) -> Report:
    report = Report()
    cfg = example2_config(exp)
    sde = _sde_params(exp)
    seed = exp.seed
    i0 = example2_i0(exp, cfg)

    if exp.pipeline == "synthesized":
        samples, proc, bg = _example2_sampleset(exp, cfg, seed,
                                                exp.get("basis", "samples", int), i0)
        basis = build_basis(samples, rank=_basis_rank(exp),
                            energy=exp.get("basis", "energy", float))
        export_basis(basis, outdir / "basis.json", _problem_block(exp, cfg))
        report.add("basis_rank", 2, basis.rank, 0.0, basis.rank == 2)
        model = synthesized_model(basis, action_hamiltonian(), cfg.eps, cfg.tau)
    else:
        model = example2_model(cfg)
    _write(outdir / "model.txt", describe_model(model))

    driver = WienerDriver(seed, model.channels)
    z0 = np.array([0.0, i0])
    ids = np.arange(sde["paths"])
    result = integrate_ensemble(model, z0, sde["T"], sde["h"], driver, ids,
                                scheme=sde["scheme"], record_every=sde["record_every"],
                                threads=exp.threads, backend=sde["backend"],
                                tol=sde["tol"], max_iter=sde["max_iter"])
    _ensemble_failures_ok(report, result, outdir, ids)
    summary = estimate_moments(result, [("I", lambda S: S[..., 1]),
                                        ("theta", lambda S: S[..., 0])])
    write_summary_csv(outdir, summary)
    write_paths_csv(outdir, result, ids, sde["store"])

    u0 = math.sqrt(2.0 * i0)
    from .bessel import bessel_j
    J = float(bessel_j(cfg.n0, u0))
    D = 0.5 * cfg.eps ** 2 * math.pi * float(np.sinc(cfg.delta)) ** 2 * cfg.n0 ** 2 * J * J
    ti = len(summary.times) - 1
    est = summary.covariances[ti, 0, 0]
    se = summary.var_std_errors[ti, 0]
    oracle = 2.0 * D * sde["T"]
    tol = 0.10 * oracle + 3.0 * se
    report.add("var_I_final", oracle, est, se, abs(est - oracle) <= tol)

    if exp.get("verify", "include_micro", bool):
        ns = exp.get("verify", "micro_samples", int)
        periods = exp.get("example2", "periods", int)
        spp = exp.get("example2", "steps_per_period", int)
        th0 = 2.0 * np.pi * _rng.uniforms(seed, _PAIR_TAG, np.arange(ns, dtype=np.uint64))
        Z0 = np.stack([th0, np.full(ns, i0)], axis=1)
        rec, failed = example2_micro_ensemble(cfg, Z0, periods, seed + 7,
                                              steps_per_period=spp,
                                              backend=sde["backend"])
        ok = failed < 0
        dI2 = (rec[ok, -1, 1] - i0) ** 2
        est = float(dI2.mean())
        se = float(dI2.std(ddof=1) / np.sqrt(dI2.size))
        oracle = 2.0 * D * (2.0 * math.pi * periods)
        tol = 0.10 * oracle + 3.0 * se
        report.add("micro_var_I", oracle, est, se, abs(est - oracle) <= tol)
    return report


def run_counterexample(exp: Experiment, outdir: Path) -> Report:
    report = Report()
    ccfg = counterexample_config(exp)
    cfg = ccfg.base
    sde = _sde_params(exp)
    seed = exp.seed

    model = counterexample_model(ccfg)
    ref = example1_model(cfg)
    _write(outdir / "model.txt", describe_model(model))

    probes = _probes_box(seed + 3, exp.get("verify", "probes", int), 6, 1.0)
    gc_model = generator_coefficients(model)
    gc_ref = generator_coefficients(ref)
    drift_diff = float(np.max(np.abs(gc_model.ito_drift(probes) - gc_ref.ito_drift(probes))))
    diff_diff = float(np.max(np.abs(gc_model.diffusion(probes) - gc_ref.diffusion(probes))))
    report.add("one_particle_drift_match", 0.0, drift_diff, 0.0, drift_diff <= 1e-10)
    report.add("one_particle_diffusion_match", 0.0, diff_diff, 0.0, diff_diff <= 1e-10)

    pair_pts = _probes_box(seed + 4, 100, 6, 1.0)
    pairs = list(zip(pair_pts[:50], pair_pts[50:]))
    resid = cross_diffusion_residual(
        model, lambda a, b: cross_diffusion(ref, a, b), 1.0, pairs)
    # two-particle law differs by design: this check is expected to fail
    report.add("cross_diffusion_match", 0.0, resid, 0.0, resid <= 0.05,
               expected_fail=True)
    report.note("cross_diffusion_match fails by design: the rotated-channel "
                "model shares the one-particle law but not the two-particle law")

    disp = _pair_dispersion(exp, model, seed, sde)
    grow = disp.mean_dv2[-1] - disp.mean_dv2[0]
    se = float(np.hypot(disp.se_dv2[-1], disp.se_dv2[0]))
    report.add("pair_velocity_desync", 0.0, grow, se, grow >= 5.0 * se,
               expected_fail=False)
    _write_dispersion(outdir, disp)
    return report


def _pair_dispersion(exp, model, seed, sde):
    pairs = exp.get("verify", "pairs", int)
    raw_t = exp.raw.get("verify", "pair_T").strip()
    T = float(raw_t) if raw_t else sde["T"]
    za = np.zeros((pairs, 6))
    zb = np.zeros((pairs, 6))
    zb[:, 0] = 1.0  # unit offset along the rotation-sensitive coordinate
    zb[:, 3] = 0.5
    driver = WienerDriver(seed, model.channels)
    res = integrate_pairs_ensemble(model, za, zb, T, sde["h"], driver,
                                   scheme=sde["scheme"],
                                   record_every=sde["record_every"],
                                   threads=exp.threads)
    return dispersion_curve(res)


def _write_dispersion(outdir, disp):
    rows = ["t,mean_dx2,se_dx2,mean_dv2,se_dv2"]
    for i, t in enumerate(disp.times):
        rows.append(",".join(_fmt(float(v)) for v in
                             (t, disp.mean_dx2[i], disp.se_dx2[i],
                              disp.mean_dv2[i], disp.se_dv2[i])))
    _write(outdir / "dispersion.csv", "\n".join(rows) + "\n")


def run_build_basis(exp: Experiment, outdir: Path) -> Report:
    report = Report()
    seed = exp.seed
    count = exp.get("basis", "samples", int)
    if exp.problem == "example2":
        cfg = example2_config(exp)
        i0 = example2_i0(exp, cfg)
        samples, _, _ = _example2_sampleset(exp, cfg, seed, count, i0)
        holdout, _, _ = _example2_sampleset(exp, cfg, seed + 1,
                                            exp.get("basis", "holdout", int), i0,
                                            first_index=10_000_000)
        expected_rank, resid_tol = 2, 0.02
        pairs = _example2_pairs(exp, samples.probe_points)
    else:
        cfg = example1_config(exp)
        samples, _, _ = _example1_sampleset(exp, cfg, seed, count)
        holdout, _, _ = _example1_sampleset(exp, cfg, seed + 1,
                                            exp.get("basis", "holdout", int),
                                            first_index=10_000_000)
        expected_rank, resid_tol = 3, 0.05
        pair_pts = _probes_box(seed + 2, 100, 6, exp.get("basis", "box_halfwidth", float))
        pairs = list(zip(pair_pts[:50], pair_pts[50:]))
    basis = build_basis(samples, rank=_basis_rank(exp),
                        energy=exp.get("basis", "energy", float))
    export_basis(basis, outdir / "basis.json", _problem_block(exp, cfg))
    lines = ["# gram eigenvalues (descending)"]
    lines += [_fmt(float(v)) for v in basis.all_eigenvalues]
    _write(outdir / "eigenvalues.txt", "\n".join(lines) + "\n")
    resid = reconstruction_residual(basis, holdout, pairs)
    report.add("basis_rank", expected_rank, basis.rank, 0.0,
               basis.rank == expected_rank)
    report.add("basis_reconstruction_residual", resid_tol, resid, 0.0,
               resid <= resid_tol)
    return report


def run_verify_fp(exp: Experiment, outdir: Path) -> Report:
    report = Report()
    seed = exp.seed
    if exp.problem == "example1":
        model = example1_model(example1_config(exp))
        probes = _probes_box(seed, exp.get("verify", "probes", int), 6, 1.0)
    elif exp.problem == "example2":
        cfg = example2_config(exp)
        model = example2_model(cfg)
        i0 = example2_i0(exp, cfg)
        n = exp.get("verify", "probes", int)
        th = 2.0 * np.pi * _rng.uniforms(seed, _PROBE_TAG, np.arange(n, dtype=np.uint64))
        iv = i0 * (0.8 + 0.4 * _rng.uniforms(seed + 1, _PROBE_TAG,
                                             np.arange(n, dtype=np.uint64)))
        probes = np.stack([th, iv], axis=1)
    else:
        ccfg = counterexample_config(exp)
        model = counterexample_model(ccfg)
        probes = _probes_box(seed, exp.get("verify", "probes", int), 6, 1.0)
    _write(outdir / "model.txt", describe_model(model))

    gc = generator_coefficients(model)
    D = gc.diffusion(probes)
    C = cross_diffusion(model, probes, probes)
    ident = float(np.max(np.abs(C - 2.0 * D)))
    report.add("diffusion_half_cross_identity", 0.0, ident, 0.0, ident <= 1e-12)

    if model.drift.hamiltonian:
        div = float(np.max(np.abs(drift_divergence(model, probes))))
        report.add("drift_liouville_divergence", 0.0, div, 0.0, div <= 1e-6)

    if exp.problem == "counterexample":
        ref = example1_model(example1_config(exp))
        gr = generator_coefficients(ref)
        dd = float(np.max(np.abs(gc.ito_drift(probes) - gr.ito_drift(probes))))
        fd = float(np.max(np.abs(D - gr.diffusion(probes))))
        report.add("one_particle_drift_match", 0.0, dd, 0.0, dd <= 1e-10)
        report.add("one_particle_diffusion_match", 0.0, fd, 0.0, fd <= 1e-10)
        pair_pts = _probes_box(seed + 4, 100, 6, 1.0)
        pairs = list(zip(pair_pts[:50], pair_pts[50:]))
        resid = cross_diffusion_residual(
            model, lambda a, b: cross_diffusion(ref, a, b), 1.0, pairs)
        report.add("cross_diffusion_match", 0.0, resid, 0.0, resid <= 0.05,
                   expected_fail=True)
        report.note("cross_diffusion_match fails by design for the "
                    "rotated-channel model (two-particle law differs)")
    return report


def run_pair_dispersion(exp: Experiment, outdir: Path) -> Report:
    report = Report()
    sde = _sde_params(exp)
    if exp.problem == "counterexample":
        model = counterexample_model(counterexample_config(exp))
    else:
        model = example1_model(example1_config(exp))
    disp = _pair_dispersion(exp, model, exp.seed, sde)
    _write_dispersion(outdir, disp)
    _write(outdir / "model.txt", describe_model(model))
    drift = float(np.max(np.abs(disp.mean_dv2 - disp.mean_dv2[0])))
    if exp.problem == "counterexample":
        grow = disp.mean_dv2[-1] - disp.mean_dv2[0]
        se = float(np.hypot(disp.se_dv2[-1], disp.se_dv2[0]))
        report.add("pair_velocity_desync", 0.0, grow, se, grow >= 5.0 * se)
    else:
        # shared state-independent noise keeps relative velocity frozen
        report.add("pair_velocity_sync", 0.0, drift, 0.0, drift <= 1e-10)
    return report


def run_weak_order(exp: Experiment, outdir: Path) -> Report:
    report = Report()
    hs = exp.floats("verify", "weak_h")
    paths = exp.get("verify", "weak_paths", int)
    a = exp.get("verify", "weak_a", float)
    b = exp.get("verify", "weak_b", float)
    T = exp.get("verify", "weak_T", float)
    model = scalar_benchmark_model(a, b)
    z0 = np.array([1.0, 0.0])
    exact = benchmark_exact_mean(1.0, a, b, T)
    errors = []
    for k, h in enumerate(hs):
        driver = WienerDriver(exp.seed + k, model.channels)
        res = integrate_ensemble(model, z0, T, h, driver, scheme="euler_heun",
                                 record_every=max(1, int(round(T / h))),
                                 threads=exp.threads, n_paths=paths,
                                 backend="python")
        errors.append(abs(float(res.states[:, -1, 0].mean()) - exact))
    fit = weak_order_fit(hs, errors)
    rows = ["h,abs_error"] + [f"{_fmt(h)},{_fmt(e)}" for h, e in zip(hs, errors)]
    _write(outdir / "weak_order.csv", "\n".join(rows) + "\n")
    report.add("weak_order_slope", 1.0, fit.slope, fit.slope_se,
               abs(fit.slope - 1.0) <= 0.2)
    return report


PIPELINES = {
    "run-example1": run_example1,
    "run-example2": run_example2,
    "run-counterexample": run_counterexample,
    "build-basis": run_build_basis,
    "verify-fp": run_verify_fp,
    "pair-dispersion": run_pair_dispersion,
    "weak-order": run_weak_order,
}


def run(exp: Experiment, outdir: Path) -> Report:
    """The full pipeline for the configured problem (model, ensembles,
    verification report)."""
    if exp.problem == "example1":
        return run_example1(exp, outdir)
    if exp.problem == "example2":
        return run_example2(exp, outdir)
    return run_counterexample(exp, outdir)


def _resolve_out(exp, cli_out):
    if cli_out:
        return Path(cli_out)
    if exp.out:
        return Path(exp.out)
    return Path(os.environ.get("STOCHACCEL_OUT", "stochaccel-out"))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stochaccel",
        description="Langevin models of stochastic acceleration: experiment "
                    "runner and verification suite")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = ["run"] + list(PIPELINES)
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (never affects results)")
    args = parser.parse_args(argv)

    overrides = {}
    if args.seed is not None:
        overrides[("experiment", "seed")] = args.seed
    if args.threads is not None:
        overrides[("experiment", "threads")] = args.threads
    try:
        exp = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    outdir = _resolve_out(exp, args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_config_echo(exp, outdir)
    try:
        if args.command == "run":
            report = run(exp, outdir)
        else:
            report = PIPELINES[args.command](exp, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    text = report.render()
    _write(outdir / "report.txt", text)
    sys.stdout.write(text)
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
