"""Concrete stochastic-acceleration problems.

Two worked problems plus supporting pieces:

* random electrostatic pulses on an unmagnetized plasma: microscopic
  pulse-kick simulator, the constant-coefficient Langevin model, and the
  rotated-channel counterexample that shares its one-particle law but not
  its two-particle law;
* magnetized ions in a high-harmonic perpendicular wave (gyrophase /
  magnetic-moment coordinates): phase-randomized microscopic simulator and
  the two-channel Langevin model with Bessel coefficients.

Conventions: phase points are (x, v) with mass-normalized velocity for the
pulse problem and (theta, I) for the wave problem.  The perturbation
amplitude knob of the pulse problem is the full pulse strength (q/m)*phi0;
the formal bookkeeping amplitude is 1 and must not be applied twice.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend, _rng
from .bessel import bessel_j, bessel_j_table, _start_order
from .kicks import PerturbationProcess, gauss_legendre
from .noise_basis import NoiseBasis
from .phase_space import (
    CallableField,
    CombinationField,
    CallableVectorField,
    HamiltonianVectorField,
    LinearField,
    ScalarField,
    TimeDependentField,
    hamiltonian_vector_field,
)
from .sde import LangevinModel

_SPHERE_TAG = 0x5704E5E  # pulse directions
_ETA_TAG = 0x0E7A0001    # wave phases (kick realizations)
_MICRO_TAG = 0x0E7A0002  # wave phases (micro simulator)


class DomainError(RuntimeError):
    """Trajectory left the validity domain; carries the period index."""

    def __init__(self, message, period=None):
        super().__init__(message)
        self.period = period


# ---------------------------------------------------------------------------
# random electrostatic pulses
# ---------------------------------------------------------------------------

def _window_profile(kind, center, halfwidth, tau):
    if kind == "uniform":
        lo, hi = 0.0, tau

        def shape(t):
            t = np.asarray(t, dtype=np.float64)
            return np.where((t >= 0.0) & (t <= tau), 1.0, 0.0)
    elif kind == "bump":
        c = center * tau
        w = halfwidth * tau
        lo, hi = max(0.0, c - w), min(tau, c + w)

        def shape(t):
            t = np.asarray(t, dtype=np.float64)
            s = (t - c) / w
            inside = np.abs(s) < 1.0
            out = np.zeros_like(s)
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                val = np.exp(-1.0 / (1.0 - s * s))
            out[inside] = val[inside]
            return out
    else:
        raise ValueError(f"unknown window kind {kind!r}")
    return shape, lo, hi


@dataclass
class PulsePlasmaConfig:
    """Pulse-problem parameters.

    `strength` is the full kick amplitude (q/m)*phi0.  The temporal window
    u(t) is either uniform on [0, tau] or a smooth compact bump centered at
    `window_center * tau` with half-width `window_halfwidth * tau`; with
    `normalize_window` the window integrates to one.  The derived moments

        m0 = strength * int u(s) ds
        m1 = strength * int (tau - s) u(s) ds

    are computed by Gauss-Legendre quadrature at construction.
    """

    strength: float = 0.1
    tau: float = 1.0
    window: str = "uniform"
    window_center: float = 0.5
    window_halfwidth: float = 0.25
    normalize_window: bool = True
    quad_nodes: int = 192

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.window == "bump":
            if not (0.0 < self.window_center < 1.0):
                raise ValueError("window_center must lie in (0, 1)")
            if self.window_halfwidth <= 0:
                raise ValueError("window_halfwidth must be positive")
        shape, lo, hi = _window_profile(self.window, self.window_center,
                                        self.window_halfwidth, self.tau)
        s, w = gauss_legendre(self.quad_nodes, lo, hi)
        area = float(np.sum(w * shape(s)))
        norm = area if self.normalize_window else 1.0
        self._shape = shape
        self._norm = norm
        self._support = (lo, hi)
        self.m0 = self.strength * area / norm
        self.m1 = self.strength * float(np.sum(w * (self.tau - s) * shape(s))) / norm

    def window_value(self, t):
        return self._shape(t) / self._norm

    def window_moments(self, nodes: int):
        """(int u, int (tau - s) u) by an n-node rule; invariant check hook."""
        lo, hi = self._support
        s, w = gauss_legendre(nodes, lo, hi)
        u = self._shape(s) / self._norm
        return float(np.sum(w * u)), float(np.sum(w * (self.tau - s) * u))


class PulsePerturbation(PerturbationProcess):
    """One pulse interval: h(x, v, t) = strength * (z_r . x) * u(t) with the
    direction z_r uniform on the unit sphere per realization."""

    dim = 6

    def __init__(self, cfg: PulsePlasmaConfig):
        self.cfg = cfg
        self.eps = 1.0  # amplitude lives in cfg.strength
        self.tau = cfg.tau
        self.tau_ac = 0.0

    def direction(self, seed, indices):
        return _rng.unit_sphere(seed, _SPHERE_TAG, np.asarray(indices))

    def field(self, seed, index):
        proc = self
        z_dir = self.direction(seed, [index])[0]

        class _Pulse(TimeDependentField):
            dim = 6

            def value(self, z, t):
                zz = np.asarray(z, dtype=np.float64)
                return (zz[..., :3] @ z_dir) * proc.cfg.strength * proc.cfg.window_value(t)

            def gradient(self, z, t):
                zz = np.asarray(z, dtype=np.float64)
                g = np.zeros_like(zz)
                g[..., :3] = z_dir * (proc.cfg.strength * proc.cfg.window_value(t))
                return g

        return _Pulse()

    def values_at(self, seed, indices, Z, t):
        dirs = self.direction(seed, indices)                     # (R, 3)
        amp = self.cfg.strength * float(self.cfg.window_value(t))
        return amp * (dirs @ Z[:, :3].T)

    def gradients_at(self, seed, indices, Z, t):
        dirs = self.direction(seed, indices)
        amp = self.cfg.strength * float(self.cfg.window_value(t))
        out = np.zeros((dirs.shape[0], Z.shape[0], 6))
        out[:, :, :3] = amp * dirs[:, None, :]
        return out


def free_particle_hamiltonian(n: int = 3) -> ScalarField:
    """H0 = |v|^2 / 2 on 2n-dimensional phase space."""
    dim = 2 * n

    def value(Z):
        return 0.5 * np.sum(Z[:, n:] ** 2, axis=1)

    def gradient(Z):
        g = np.zeros_like(Z)
        g[:, n:] = Z[:, n:]
        return g

    def hessian(Z):
        h = np.zeros((Z.shape[0], dim, dim))
        for j in range(n, dim):
            h[:, j, j] = 1.0
        return h

    return CallableField(dim, value, gradient, hessian, name="free-particle")


def example1_model(cfg: PulsePlasmaConfig) -> LangevinModel:
    """Constant-coefficient Langevin model of the pulse problem.

    Noise Hamiltonians (1/sqrt(3 tau)) e_i . (m1 v - m0 x); ensemble-mean
    second-order kick is constant and contributes nothing to the drift, so
    the drift Hamiltonian is |v|^2/2.
    """
    drift = hamiltonian_vector_field(free_particle_hamiltonian())
    scale = 1.0 / math.sqrt(3.0 * cfg.tau)
    noise = []
    for i in range(3):
        a = np.zeros(6)
        a[i] = -cfg.m0 * scale
        a[3 + i] = cfg.m1 * scale
        noise.append(hamiltonian_vector_field(
            LinearField(a, name=f"pulse-mode[{i}]")))
    return LangevinModel(drift, noise, name="example1")


def pulse_directions(seed: int, sample_ids, pulse_index: int):
    """Unit pulse directions keyed by (seed, sample, pulse)."""
    ids = np.asarray(sample_ids, dtype=np.uint64)
    return _rng.unit_sphere(seed, _SPHERE_TAG, ids, np.uint64(pulse_index))


def example1_micro_run(cfg: PulsePlasmaConfig, z0, pulse_count: int, seed: int,
                       sample_id: int = 0):
    """Exact microscopic trajectory: per interval, ballistic flight plus the
    windowed pulse force, integrated in closed form (the force is spatially
    constant), recorded at interval boundaries.

    Over one interval with direction z: x += v tau - m1 z, v += -m0 z.
    Identical to row `sample_id` of `example1_micro_ensemble`.
    """
    if pulse_count < 0:
        raise ValueError("pulse_count must be >= 0")
    z = np.asarray(z0, dtype=np.float64).copy()
    if z.shape != (6,):
        raise ValueError("z0 must have shape (6,)")
    out = np.empty((pulse_count + 1, 6))
    out[0] = z
    for k in range(pulse_count):
        d = pulse_directions(seed, [sample_id], k)[0]
        x, v = z[:3], z[3:]
        x = x + v * cfg.tau - cfg.m1 * d
        v = v - cfg.m0 * d
        z = np.concatenate([x, v])
        out[k + 1] = z
    return out


def example1_micro_ensemble(cfg: PulsePlasmaConfig, z0, samples: int,
                            pulse_count: int, seed: int):
    """Final states of `samples` independent micro trajectories, (S, 6).

    Directions are keyed by (seed, sample, pulse), so any subset of samples
    reproduces bitwise.
    """
    z = np.broadcast_to(np.asarray(z0, dtype=np.float64), (samples, 6)).copy()
    ids = np.arange(samples)
    for k in range(pulse_count):
        dirs = pulse_directions(seed, ids, k)
        z[:, :3] += z[:, 3:] * cfg.tau - cfg.m1 * dirs
        z[:, 3:] -= cfg.m0 * dirs
    return z


# ---------------------------------------------------------------------------
# counterexample: rotated noise channels
# ---------------------------------------------------------------------------

def phase_field_zero() -> ScalarField:
    return CallableField(6, lambda Z: np.zeros(Z.shape[0]),
                         lambda Z: np.zeros_like(Z), name="phi=0")


def phase_field_constant(c: float) -> ScalarField:
    return CallableField(6, lambda Z: np.full(Z.shape[0], float(c)),
                         lambda Z: np.zeros_like(Z), name=f"phi={c}")


def phase_field_linear(k) -> ScalarField:
    """phi(x, v) = k . x."""
    a = np.zeros(6)
    a[:3] = np.asarray(k, dtype=np.float64)
    return LinearField(a, name="phi=k.x")


@dataclass
class CounterexampleConfig:
    base: PulsePlasmaConfig
    phi_kind: str = "linear"
    phi_value: float = 0.0
    phi_vector: tuple = (1.0, 0.0, 0.0)
    phi_field: Optional[ScalarField] = None

    def phase_field(self) -> ScalarField:
        if self.phi_kind == "zero":
            return phase_field_zero()
        if self.phi_kind == "constant":
            return phase_field_constant(self.phi_value)
        if self.phi_kind == "linear":
            return phase_field_linear(self.phi_vector)
        if self.phi_kind == "custom":
            if self.phi_field is None:
                raise ValueError("custom phi requires phi_field")
            return self.phi_field
        raise ValueError(f"unknown phi_kind {self.phi_kind!r}")


def counterexample_model(cfg: CounterexampleConfig) -> LangevinModel:
    """Six raw noise channels obtained by rotating the pulse-model channels
    through the state-dependent angle phi(x, v).

    Shares the pulse model's one-particle generator for every phi; for
    non-constant phi the two-point cross-diffusion differs.
    """
    base = cfg.base
    phi = cfg.phase_field()
    drift = hamiltonian_vector_field(free_particle_hamiltonian())
    scale = 1.0 / math.sqrt(3.0 * base.tau)
    cs = []
    for i in range(3):
        c = np.zeros(6)
        c[i] = base.m1 * scale
        c[3 + i] = base.m0 * scale
        cs.append(c)

    def channel(c, trig, dtrig, label):
        def ev(Z):
            return trig(phi._value(Z))[:, None] * c

        def jac(Z):
            g = phi._gradient(Z)
            return dtrig(phi._value(Z))[:, None, None] * np.einsum("i,mj->mij", c, g)

        return CallableVectorField(6, ev, jac, name=label)

    noise = [channel(c, np.cos, lambda p: -np.sin(p), f"cos-ch[{i}]")
             for i, c in enumerate(cs)]
    noise += [channel(c, lambda p: -np.sin(p), lambda p: -np.cos(p), f"sin-ch[{i}]")
              for i, c in enumerate(cs)]
    return LangevinModel(drift, noise, name="counterexample")


# ---------------------------------------------------------------------------
# magnetized ions in a perpendicular high-harmonic wave
# ---------------------------------------------------------------------------

@dataclass
class KarneyConfig:
    """Wave-problem parameters: amplitude eps, harmonic nu = n0 + delta with
    0 < |delta| < 1/2, period 2 pi.  `i_min`/`i_max` bound the validity
    domain (the action coordinate is singular at zero and the Bessel table
    size is frozen from `i_max` so results never depend on batch shape).
    `series_margin` widens the secular-series window beyond the classical
    turning point."""

    eps: float = 0.05
    n0: int = 30
    delta: float = 0.05
    i_min: float = 1e-3
    i_max: Optional[float] = None
    series_margin: int = 40

    def __post_init__(self):
        if self.n0 < 1:
            raise ValueError("n0 must be a positive integer")
        if not 0.0 < abs(self.delta) < 0.5:
            raise ValueError("delta must satisfy 0 < |delta| < 1/2")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.i_max is None:
            self.i_max = 0.5 * (self.n0 + 25.0) ** 2
        if not 0.0 < self.i_min < self.i_max:
            raise ValueError("need 0 < i_min < i_max")

    @property
    def nu(self):
        return self.n0 + self.delta

    @property
    def tau(self):
        return 2.0 * math.pi

    @property
    def u_max(self):
        return math.sqrt(2.0 * self.i_max)

    def series_window(self):
        """Integer orders of the secular series, [n_lo, n_hi]."""
        reach = int(math.ceil(self.u_max)) + self.series_margin
        return -reach, max(self.n0, int(math.ceil(self.u_max))) + self.series_margin

    def table_spec(self):
        """(nmax, start_order) of the frozen Bessel table."""
        _, n_hi = self.series_window()
        nmax = max(n_hi, -self.series_window()[0], self.n0) + 1
        return nmax, _start_order(nmax, self.u_max)


def _sinc(x):
    return np.sinc(x / np.pi)


def _signed_table(cfg: KarneyConfig, u):
    """J_n(u), J_n'(u) for all series orders, negative via reflection.

    Returns (orders (L,), J (L, ...), Jp (L, ...)).  The table start order
    is frozen from the config, so per-element values are independent of the
    batch the element arrives in.
    """
    n_lo, n_hi = cfg.series_window()
    nmax, start = cfg.table_spec()
    table = bessel_j_table(nmax, u, start_order=start)
    orders = np.arange(n_lo, n_hi + 1)
    absn = np.abs(orders)
    signs = np.where((orders < 0) & (absn % 2 == 1), -1.0, 1.0)
    J = signs[(slice(None),) + (None,) * table[0].ndim] * table[absn]
    # J'_n = (J_{n-1} - J_{n+1})/2 with reflection handled on signed orders
    am, ap = np.abs(orders - 1), np.abs(orders + 1)
    sm = np.where((orders - 1 < 0) & (am % 2 == 1), -1.0, 1.0)
    sp = np.where((orders + 1 < 0) & (ap % 2 == 1), -1.0, 1.0)
    expand = (slice(None),) + (None,) * table[0].ndim
    Jp = 0.5 * (sm[expand] * table[am] - sp[expand] * table[ap])
    return orders, J, Jp


def karney_s2_secular(cfg: KarneyConfig, I, with_derivative: bool = False):
    """Secular (angle-averaged) part of the mean second-order kick.

    E(I) = -(pi/u) sum_n n J_n(u) J_n'(u) g_n,   g_n = (sinc(2 pi c_n) - 1)/c_n,
    c_n = nu - n, u = sqrt(2 I).  The sum runs over the window from the
    config; it is the numerically stable arrangement of the equivalent
    principal-value series plus resonant-sinc form (the near-resonant 1/delta
    pieces cancel between the two).  Optionally returns d/dI as well, via
    the Bessel differential equation.
    """
    Ia = np.asarray(I, dtype=np.float64)
    u = np.sqrt(2.0 * np.maximum(Ia, 0.0))
    orders, J, Jp = _signed_table(cfg, u)
    c = cfg.nu - orders.astype(np.float64)
    g = (_sinc(2.0 * np.pi * c) - 1.0) / c
    w = (orders * g)[(slice(None),) + (None,) * Ia.ndim]
    val = -np.pi * np.sum(w * J * Jp / u, axis=0)
    if not with_derivative:
        return val
    # d/dI = (1/u) d/du;  d(J J'/u)/du = [J'^2 - (1 - n^2/u^2) J^2]/u - 2 J J'/u^2
    n2 = (orders.astype(np.float64) ** 2)[(slice(None),) + (None,) * Ia.ndim]
    dt = (Jp * Jp - (1.0 - n2 / (u * u)) * J * J) / u - 2.0 * J * Jp / (u * u)
    dval = -(np.pi / u) * np.sum(w * dt, axis=0)
    return val, dval


def karney_s2_tail_estimate(cfg: KarneyConfig, I) -> float:
    """Magnitude of the largest dropped-edge term of the secular series;
    reported with the truncation per the super-exponential Bessel decay."""
    Ia = np.atleast_1d(np.asarray(I, dtype=np.float64))
    u = np.sqrt(2.0 * Ia)
    orders, J, Jp = _signed_table(cfg, u)
    c = cfg.nu - orders.astype(np.float64)
    g = (_sinc(2.0 * np.pi * c) - 1.0) / c
    terms = np.abs((orders * g)[:, None] * J * Jp / u) * np.pi / u
    return float(max(terms[0].max(), terms[-1].max()))


class KarneyPerturbation(PerturbationProcess):
    """Wave perturbation over one period with a uniformly random phase.

    `variant` selects the full Hamiltonian perturbation or its resonant
    single-harmonic reduction (the slowly varying term that dominates the
    accumulated kick).  Both share the phase draw eta(index); the full
    variant offsets its phase so the two integrated kicks line up.
    `stratified` draws eta on a randomized lattice (unbiased, and the
    phase-harmonic averages converge much faster than iid sampling).
    """

    dim = 2

    def __init__(self, cfg: KarneyConfig, variant: str = "full",
                 stratified: bool = False, strata: int = 64):
        if variant not in ("full", "single_harmonic"):
            raise ValueError("variant must be 'full' or 'single_harmonic'")
        self.cfg = cfg
        self.variant = variant
        self.stratified = stratified
        self.strata = strata
        self.eps = cfg.eps
        self.tau = cfg.tau
        self.tau_ac = 2.0 * math.pi / cfg.nu

    def phase(self, seed, indices):
        idx = np.asarray(indices, dtype=np.uint64)
        u = _rng.uniforms(seed, _ETA_TAG, idx)
        if not self.stratified:
            return 2.0 * np.pi * u
        cell = (idx % np.uint64(self.strata)).astype(np.float64)
        return 2.0 * np.pi * (cell + u) / self.strata

    def field(self, seed, index):
        proc = self
        eta = float(self.phase(seed, [index])[0])

        class _Wave(TimeDependentField):
            dim = 2

            def value(self, z, t):
                zz = np.asarray(z, dtype=np.float64)
                return proc._values(zz[None] if zz.ndim == 1 else zz,
                                    np.asarray([eta]), t)[0]

            def gradient(self, z, t):
                zz = np.asarray(z, dtype=np.float64)
                single = zz.ndim == 1
                g = proc._gradients(zz[None] if single else zz,
                                    np.asarray([eta]), t)[0]
                return g[0] if single else g

        return _Wave()

    def values_at(self, seed, indices, Z, t):
        return self._values(Z, self.phase(seed, indices), t)

    def gradients_at(self, seed, indices, Z, t):
        return self._gradients(Z, self.phase(seed, indices), t)

    # internal closed forms, vectorized over realizations x points
    def _values(self, Z, etas, t):
        cfg = self.cfg
        theta, I = Z[:, 0], Z[:, 1]
        u = np.sqrt(2.0 * I)
        if self.variant == "full":
            ph = u * np.sin(theta) - cfg.nu * t - (np.pi - np.pi * cfg.delta - etas[:, None])
            return -np.sin(ph)
        J = self._jn0(u)
        ph = cfg.n0 * theta - cfg.nu * t + np.pi * cfg.delta + etas[:, None]
        return J * np.sin(ph)

    def _gradients(self, Z, etas, t):
        cfg = self.cfg
        theta, I = Z[:, 0], Z[:, 1]
        u = np.sqrt(2.0 * I)
        out = np.empty((etas.shape[0], Z.shape[0], 2))
        if self.variant == "full":
            ph = u * np.sin(theta) - cfg.nu * t - (np.pi - np.pi * cfg.delta - etas[:, None])
            c = np.cos(ph)
            out[:, :, 0] = -c * (u * np.cos(theta))
            out[:, :, 1] = -c * (np.sin(theta) / u)
        else:
            J, Jp = self._jn0(u, True)
            ph = cfg.n0 * theta - cfg.nu * t + np.pi * cfg.delta + etas[:, None]
            out[:, :, 0] = J * cfg.n0 * np.cos(ph)
            out[:, :, 1] = (Jp / u) * np.sin(ph)
        return out

    def _jn0(self, u, with_derivative=False):
        cfg = self.cfg
        nmax, start = cfg.table_spec()
        table = bessel_j_table(cfg.n0 + 1, u, start_order=start)
        if not with_derivative:
            return table[cfg.n0]
        return table[cfg.n0], 0.5 * (table[cfg.n0 - 1] - table[cfg.n0 + 1])


def karney_first_jprime_zero(n0: int) -> float:
    """First positive zero of J_n0' beyond the turning point (the first
    maximum of J_n0); bisection on the derivative recurrence."""
    lo = n0 + 0.3 * n0 ** (1.0 / 3.0)
    hi = n0 + 2.5 * n0 ** (1.0 / 3.0) + 3.0

    def jp(u):
        return float(bessel_j(n0, u, derivative=True))

    flo = jp(lo)
    for _ in range(200):
        if np.sign(jp(hi)) != np.sign(flo):
            break
        hi += 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        fm = jp(mid)
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def action_hamiltonian() -> ScalarField:
    """Background H0 = I on (theta, I) phase space."""

    def value(Z):
        return Z[:, 1].copy()

    def gradient(Z):
        g = np.zeros_like(Z)
        g[:, 1] = 1.0
        return g

    def hessian(Z):
        return np.zeros((Z.shape[0], 2, 2))

    return CallableField(2, value, gradient, hessian, name="action")


def example2_model(cfg: KarneyConfig) -> LangevinModel:
    """Two-channel Langevin model of the wave problem.

    Noise Hamiltonians  eps sqrt(pi) sinc(pi delta) J_n0(sqrt(2I)) {cos, sin}(n0 theta)
    (the basis pair scaled by eps/sqrt(2 pi)); drift Hamiltonian
    I + (eps^2 / 2 pi) E(I) with the secular series E of
    `karney_s2_secular`.  Evaluations outside [i_min, i_max] yield NaN so
    ensemble runs flag the path instead of aborting.
    """
    c = cfg.eps * math.sqrt(math.pi) * float(_sinc(np.pi * cfg.delta))
    drift_scale = cfg.eps ** 2 / (2.0 * math.pi)
    n0 = cfg.n0
    nmax, start = cfg.table_spec()

    def guard(I):
        with np.errstate(invalid="ignore"):
            return np.isfinite(I) & (I >= cfg.i_min) & (I <= cfg.i_max)

    def clamp(I):
        # non-finite actions (frozen failed paths) evaluate at i_min; the
        # guard masks the output to NaN regardless
        safe = np.where(np.isfinite(I), I, cfg.i_min)
        return np.clip(safe, cfg.i_min, cfg.i_max)

    def jpair(I):
        u = np.sqrt(2.0 * clamp(I))
        t = bessel_j_table(n0 + 1, u, start_order=start)
        return u, t[n0], 0.5 * (t[n0 - 1] - t[n0 + 1])

    def noise_field(trig, dtrig, label):
        def value(Z):
            theta, I = Z[:, 0], Z[:, 1]
            _, J, _ = jpair(I)
            out = c * J * trig(n0 * theta)
            return np.where(guard(I), out, np.nan)

        def gradient(Z):
            theta, I = Z[:, 0], Z[:, 1]
            u, J, Jp = jpair(I)
            g = np.empty_like(Z)
            g[:, 0] = c * J * n0 * dtrig(n0 * theta)
            g[:, 1] = c * (Jp / u) * trig(n0 * theta)
            ok = guard(I)
            g[~ok] = np.nan
            return g

        return CallableField(2, value, gradient, name=label)

    g1 = noise_field(np.cos, lambda a: -np.sin(a), "wave-mode-cos")
    g2 = noise_field(np.sin, np.cos, "wave-mode-sin")

    def drift_value(Z):
        I = Z[:, 1]
        es2 = karney_s2_secular(cfg, clamp(I))
        return np.where(guard(I), I + drift_scale * es2, np.nan)

    def drift_gradient(Z):
        I = Z[:, 1]
        _, des2 = karney_s2_secular(cfg, clamp(I), with_derivative=True)
        g = np.zeros_like(Z)
        g[:, 1] = 1.0 + drift_scale * des2
        g[~guard(I)] = np.nan
        return g

    h0 = CallableField(2, drift_value, drift_gradient, name="wave-drift")

    n_lo, n_hi = cfg.series_window()
    orders = np.arange(n_lo, n_hi + 1)
    cc = cfg.nu - orders.astype(np.float64)
    g_list = (np.sinc(2.0 * cc) - 1.0) / cc  # np.sinc(x) = sin(pi x)/(pi x)
    params = {
        "n0": n0,
        "noise_coef": c,
        "drift_scale": drift_scale,
        "n_lo": n_lo,
        "g_list": g_list,
        "table_start": start,
        "table_nmax": nmax,
        "i_min": cfg.i_min,
        "u_max": cfg.u_max,
    }
    return LangevinModel(hamiltonian_vector_field(h0),
                         [hamiltonian_vector_field(g1), hamiltonian_vector_field(g2)],
                         name="example2", kernel_name="karney_sde",
                         kernel_params=params)


def _micro_rhs(theta, I, s, eta, eps, nu):
    u = np.sqrt(2.0 * I)
    ph = u * np.sin(theta) - nu * s - eta
    c = np.cos(ph)
    return 1.0 - eps * c * np.sin(theta) / u, eps * c * u * np.cos(theta)


def _micro_period_numpy(theta, I, eta, eps, nu, spp):
    h = 2.0 * np.pi / spp
    s = 0.0
    for _ in range(spp):
        k1t, k1i = _micro_rhs(theta, I, s, eta, eps, nu)
        k2t, k2i = _micro_rhs(theta + 0.5 * h * k1t, I + 0.5 * h * k1i, s + 0.5 * h, eta, eps, nu)
        k3t, k3i = _micro_rhs(theta + 0.5 * h * k2t, I + 0.5 * h * k2i, s + 0.5 * h, eta, eps, nu)
        k4t, k4i = _micro_rhs(theta + h * k3t, I + h * k3i, s + h, eta, eps, nu)
        theta = theta + (h / 6.0) * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)
        I = I + (h / 6.0) * (k1i + 2.0 * k2i + 2.0 * k3i + k4i)
        s += h
    theta = theta - 2.0 * np.pi * np.floor(theta / (2.0 * np.pi))
    return theta, I


def example2_micro_run(cfg: KarneyConfig, z0, period_count: int, seed: int,
                       steps_per_period: int = 512):
    """One microscopic trajectory of the wave problem.

    Per period the wave phase is redrawn uniformly and the canonical
    equations of I - eps sin(sqrt(2I) sin(theta) - nu t - eta) are
    integrated by fixed-step RK4; states are recorded at period ends.
    Raises DomainError (with the period index) if I leaves [i_min, inf).
    """
    z = np.asarray(z0, dtype=np.float64)
    if z.shape != (2,):
        raise ValueError("z0 must be (theta, I)")
    if z[1] < cfg.i_min:
        raise DomainError("initial action below i_min", period=0)
    out = np.empty((period_count + 1, 2))
    out[0] = z
    theta = np.asarray([z[0]])
    I = np.asarray([z[1]])
    for p in range(period_count):
        eta = _rng.uniforms(seed, _MICRO_TAG, np.uint64(0), np.uint64(p)) * 2.0 * np.pi
        theta, I = _micro_period_numpy(theta, I, eta, cfg.eps, cfg.nu,
                                       steps_per_period)
        if not np.isfinite(I[0]) or I[0] < cfg.i_min:
            raise DomainError(f"action left the domain during period {p}", period=p)
        out[p + 1] = (theta[0], I[0])
    return out


def example2_micro_ensemble(cfg: KarneyConfig, Z0, period_count: int, seed: int,
                            steps_per_period: int = 512, backend: str = "auto"):
    """Ensemble version: (records (S, P+1, 2), failed period per sample).

    Wave phases are keyed by (seed, sample, period) and shared verbatim
    between the compiled and numpy backends.
    """
    Z = np.ascontiguousarray(np.atleast_2d(np.asarray(Z0, dtype=np.float64)))
    S = Z.shape[0]
    ids = np.arange(S, dtype=np.uint64)[:, None]
    periods = np.arange(period_count, dtype=np.uint64)[None, :]
    etas = np.ascontiguousarray(
        2.0 * np.pi * _rng.uniforms(seed, _MICRO_TAG, ids, periods))

    records = np.empty((S, period_count + 1, 2))
    records[:, 0] = Z
    failed = np.full(S, -1, dtype=np.int64)

    kern = _backend.micro_kernel(backend)
    if kern is not None:
        kern(np.ascontiguousarray(Z), etas, cfg.eps, cfg.nu, steps_per_period,
             cfg.i_min, records, failed)
        return records, failed

    theta, I = Z[:, 0].copy(), Z[:, 1].copy()
    alive = np.ones(S, dtype=bool)
    with np.errstate(invalid="ignore", over="ignore"):
        for p in range(period_count):
            nt, ni = _micro_period_numpy(theta, I, etas[:, p], cfg.eps, cfg.nu,
                                         steps_per_period)
            bad = (~np.isfinite(ni) | (ni < cfg.i_min)) & alive
            failed[bad] = p
            alive &= ~bad
            theta = np.where(alive, nt, theta)
            I = np.where(alive, ni, I)
            records[:, p + 1, 0] = theta
            records[:, p + 1, 1] = I
    return records, failed


# ---------------------------------------------------------------------------
# synthesized models and the weak-order benchmark model
# ---------------------------------------------------------------------------

def synthesized_model(basis: NoiseBasis, background: ScalarField, eps: float,
                      tau: float, s2_mean: Optional[ScalarField] = None,
                      name: str = "synthesized") -> LangevinModel:
    """Assemble the Langevin model from an empirical noise basis.

    Noise Hamiltonians are (eps / sqrt(tau)) H_k; the drift Hamiltonian is
    the background plus (eps^2 / tau) times the mean second-order kick when
    one is supplied.
    """
    scale = eps / math.sqrt(tau)
    noise = [hamiltonian_vector_field(
        CombinationField(scale * basis.coefficients[k], basis.samples.fields,
                         name=f"synth-mode[{k}]"))
        for k in range(basis.rank)]
    if s2_mean is None:
        h0 = background
    else:
        h0 = CombinationField([1.0, eps ** 2 / tau], [background, s2_mean],
                              name="synth-drift")
    return LangevinModel(hamiltonian_vector_field(h0), noise, name=name)


def scalar_benchmark_model(a: float, b: float) -> LangevinModel:
    """State-dependent scalar test model dz1 = a z1 dt + b z1 o dW (raw
    fields embedded in a 2-dimensional phase space; z2 is inert).

    The exact observable mean is E[z1(T)] = z1(0) exp((a + b^2/2) T).
    """
    def dv(Z):
        out = np.zeros_like(Z)
        out[:, 0] = a * Z[:, 0]
        return out

    def dj(Z):
        out = np.zeros((Z.shape[0], 2, 2))
        out[:, 0, 0] = a
        return out

    def nv(Z):
        out = np.zeros_like(Z)
        out[:, 0] = b * Z[:, 0]
        return out

    def nj(Z):
        out = np.zeros((Z.shape[0], 2, 2))
        out[:, 0, 0] = b
        return out

    return LangevinModel(CallableVectorField(2, dv, dj, name="a*z"),
                         [CallableVectorField(2, nv, nj, name="b*z")],
                         name="scalar-benchmark")


def benchmark_exact_mean(z1_0: float, a: float, b: float, T: float) -> float:
    return z1_0 * math.exp((a + 0.5 * b * b) * T)
