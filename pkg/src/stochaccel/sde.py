"""Stratonovich Langevin models and their integrators.

Two steppers are provided: Euler-Heun (predictor-corrector, weak order 1)
and derivative-free implicit midpoint (symplectic per step for Hamiltonian
models, solved by fixed-point iteration).

Wiener increments are counter-based: the increment for (path id, step,
channel) is a pure hash of those labels and the master seed, so ensembles
are reproducible independently of chunking or worker count, and pair
propagation shares a stream by construction (both particles draw with the
same pair id).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _backend, _rng
from .phase_space import ScalarField, VectorField, as_points

_PATH_TAG = 0x5DE0001  # label word separating path streams from other draws

STEP_BLOCK = 256       # steps per generated increment block


class StepError(RuntimeError):
    """A stepper produced a non-finite state; carries the inputs."""

    def __init__(self, message, z=None, h=None, dW=None):
        super().__init__(message)
        self.z = z
        self.h = h
        self.dW = dW


class MidpointError(StepError):
    """Fixed-point iteration failed to contract within max_iter."""


class LangevinModel:
    """Stratonovich SDE  dz = a(z) dt + sum_k b_k(z) o dW_k.

    `drift` and each noise field are VectorFields; for fully Hamiltonian
    models every field carries its generating ScalarField.  `kernel_name`
    and `kernel_params` optionally point at a compiled fast path for
    ensemble integration; the generic route works for any model.
    """

    def __init__(self, drift: VectorField, noise_fields: Sequence[VectorField],
                 name: str = "", kernel_name: Optional[str] = None,
                 kernel_params: Optional[dict] = None):
        self.drift = drift
        self.noise_fields = list(noise_fields)
        self.dim = drift.dim
        for b in self.noise_fields:
            if b.dim != self.dim:
                raise ValueError("noise field dimension mismatch")
        self.name = name
        self.kernel_name = kernel_name
        self.kernel_params = kernel_params or {}

    @property
    def channels(self):
        return len(self.noise_fields)

    @property
    def is_hamiltonian(self):
        return self.drift.hamiltonian and all(b.hamiltonian for b in self.noise_fields)

    def generating_fields(self):
        """Generating Hamiltonians (drift first) for Hamiltonian models."""
        if not self.is_hamiltonian:
            raise ValueError("model has non-Hamiltonian fields")
        return [self.drift.generator] + [b.generator for b in self.noise_fields]

    def __repr__(self):
        kind = "hamiltonian" if self.is_hamiltonian else "raw"
        return f"<LangevinModel {self.name or ''} dim={self.dim} channels={self.channels} {kind}>"


class WienerDriver:
    """Seeded, replayable multi-channel Brownian increment source."""

    def __init__(self, seed: int, channels: int):
        if channels < 0:
            raise ValueError("channels must be >= 0")
        self.seed = int(seed)
        self.channels = int(channels)

    def increments(self, path_id: int, step_lo: int, step_hi: int, h: float) -> np.ndarray:
        """Increments for one path over [step_lo, step_hi), shape (S, K)."""
        return self.increments_block(np.asarray([path_id]), step_lo, step_hi, h)[0]

    def increments_block(self, path_ids, step_lo: int, step_hi: int, h: float) -> np.ndarray:
        """Increments for many paths, shape (P, S, K); variance h per entry."""
        ids = np.asarray(path_ids, dtype=np.uint64)[:, None, None]
        steps = np.arange(step_lo, step_hi, dtype=np.uint64)[None, :, None]
        chans = np.arange(self.channels, dtype=np.uint64)[None, None, :]
        z = _rng.normals(self.seed, _PATH_TAG, ids, steps, chans)
        return np.sqrt(h) * z


@dataclass
class PathState:
    """One record along a path; `drift_energy` tracks the drift Hamiltonian
    when the model provides one."""

    z: np.ndarray
    time: float
    step: int
    drift_energy: Optional[float] = None


@dataclass
class EnsembleResult:
    """Recorded states of an ensemble run.

    `states` has shape (paths, records, 2n); rows that failed mid-run hold
    their last finite state repeated and are flagged in `failed_step`
    (-1 marks success).
    """

    times: np.ndarray
    states: np.ndarray
    failed_step: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_failed(self):
        return int(np.sum(self.failed_step >= 0))

    @property
    def ok(self):
        return self.failed_step < 0


def _eval_fields(model, Z):
    a = model.drift._eval(Z)
    bs = [b._eval(Z) for b in model.noise_fields]
    return a, bs


def _euler_heun_batch(model, Z, h, dW):
    a0, b0 = _eval_fields(model, Z)
    pred = Z + h * a0
    for k, b in enumerate(b0):
        pred = pred + dW[:, k][:, None] * b
    a1, b1 = _eval_fields(model, pred)
    out = Z + 0.5 * h * (a0 + a1)
    for k in range(model.channels):
        out = out + (0.5 * dW[:, k])[:, None] * (b0[k] + b1[k])
    return out


def _midpoint_batch(model, Z, h, dW, tol, max_iter):
    """Implicit midpoint by fixed-point iteration with per-row freezing:
    a row stops updating the moment its own update is below tol, so results
    are independent of which rows share a batch."""
    a0, b0 = _eval_fields(model, Z)
    cur = Z + h * a0
    for k, b in enumerate(b0):
        cur = cur + dW[:, k][:, None] * b
    active = np.ones(Z.shape[0], dtype=bool)
    iterations = np.zeros(Z.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        mid = 0.5 * (Z[idx] + cur[idx])
        am, bm = _eval_fields(model, mid)
        nxt = Z[idx] + h * am
        for k, b in enumerate(bm):
            nxt = nxt + dW[idx, k][:, None] * b
        delta = np.max(np.abs(nxt - cur[idx]), axis=1)
        cur[idx] = nxt
        iterations[idx] += 1
        scale = 1.0 + np.max(np.abs(Z[idx]), axis=1)
        with np.errstate(invalid="ignore"):
            done = delta <= tol * scale
        done |= ~np.isfinite(delta)
        active[idx[done]] = False
    converged = ~active
    return cur, iterations, converged


def euler_heun_step(model: LangevinModel, z, h: float, dW):
    """One Stratonovich Euler-Heun (predictor-corrector) step."""
    if h <= 0:
        raise ValueError("h must be positive")
    arr, single = as_points(z, model.dim)
    dWa = np.atleast_2d(np.asarray(dW, dtype=np.float64))
    if dWa.shape[-1] != model.channels:
        raise ValueError(f"expected {model.channels} increments, got {dWa.shape[-1]}")
    out = _euler_heun_batch(model, arr, h, dWa)
    if not np.all(np.isfinite(out)):
        raise StepError("non-finite state after Euler-Heun step", z=z, h=h, dW=dW)
    return out[0] if single else out


def midpoint_step(model: LangevinModel, z, h: float, dW,
                  tol: float = 1e-12, max_iter: int = 50):
    """One implicit-midpoint step, z' = z + h a(m) + sum b_k(m) dW_k with
    m = (z + z')/2, solved by fixed-point iteration to `tol`."""
    if h <= 0:
        raise ValueError("h must be positive")
    if tol <= 0:
        raise ValueError("tol must be positive")
    arr, single = as_points(z, model.dim)
    dWa = np.atleast_2d(np.asarray(dW, dtype=np.float64))
    out, iters, converged = _midpoint_batch(model, arr, h, dWa, tol, max_iter)
    if not np.all(converged) or not np.all(np.isfinite(out)):
        raise MidpointError(
            f"midpoint iteration did not converge within {max_iter} iterations "
            "(h too large or fields too stiff)", z=z, h=h, dW=dW)
    return out[0] if single else out


def midpoint_iteration_count(model, z, h, dW, tol=1e-12, max_iter=50):
    """Iterations the midpoint solver needs at (z, dW); diagnostics."""
    arr, _ = as_points(z, model.dim)
    dWa = np.atleast_2d(np.asarray(dW, dtype=np.float64))
    _, iters, converged = _midpoint_batch(model, arr, h, dWa, tol, max_iter)
    if not np.all(converged):
        raise MidpointError("midpoint iteration did not converge", z=z, h=h, dW=dW)
    return iters


def _step_count(T, h):
    N = int(round(T / h))
    if abs(N * h - T) > 1e-9 * max(abs(T), 1.0):
        raise ValueError(f"T={T} is not an integer multiple of h={h}")
    return N


def integrate(model: LangevinModel, z0, T: float, h: float, driver: WienerDriver,
              path_id: int, scheme: str = "euler_heun",
              tol: float = 1e-12, max_iter: int = 50) -> list:
    """Integrate a single path, recording every step.

    Fully reproducible from (driver.seed, path_id); raises StepError with
    the step index on failure.
    """
    arr, _ = as_points(z0, model.dim)
    N = _step_count(T, h)
    gen = model.drift.generator if model.drift.hamiltonian else None

    def record(Z, step):
        e = float(gen.value(Z[0])) if gen is not None else None
        return PathState(Z[0].copy(), step * h, step, e)

    states = [record(arr, 0)]
    Z = arr.copy()
    for step in range(N):
        dW = driver.increments(path_id, step, step + 1, h)
        try:
            if scheme == "euler_heun":
                Z = _euler_heun_batch(model, Z, h, dW)
            elif scheme == "midpoint":
                Z, _, conv = _midpoint_batch(model, Z, h, dW, tol, max_iter)
                if not np.all(conv):
                    raise MidpointError("midpoint iteration did not converge",
                                        z=Z, h=h, dW=dW)
            else:
                raise ValueError(f"unknown scheme {scheme!r}")
            if not np.all(np.isfinite(Z)):
                raise StepError("non-finite state", z=Z, h=h, dW=dW)
        except StepError as exc:
            raise StepError(f"step {step} failed: {exc}", z=exc.z, h=h, dW=exc.dW) from None
        states.append(record(Z, step + 1))
    return states


def _record_indices(N, record_every):
    rec = np.arange(0, N + 1, record_every)
    if rec[-1] != N:
        rec = np.append(rec, N)
    return rec


def _integrate_chunk_python(model, Z0, N, h, driver, path_ids, scheme,
                            record_every, tol, max_iter):
    P = Z0.shape[0]
    rec = _record_indices(N, record_every)
    out = np.empty((P, len(rec), model.dim))
    failed = np.full(P, -1, dtype=np.int64)
    out[:, 0] = Z0
    cur = Z0.copy()
    next_rec = 1
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        for lo in range(0, N, STEP_BLOCK):
            hi = min(lo + STEP_BLOCK, N)
            dW = driver.increments_block(path_ids, lo, hi, h)
            for s in range(lo, hi):
                alive = failed < 0
                if scheme == "euler_heun":
                    nxt = _euler_heun_batch(model, cur, h, dW[:, s - lo])
                    bad = ~np.all(np.isfinite(nxt), axis=1)
                else:
                    nxt, _, conv = _midpoint_batch(model, cur, h, dW[:, s - lo],
                                                   tol, max_iter)
                    bad = ~conv | ~np.all(np.isfinite(nxt), axis=1)
                newly = bad & alive
                failed[newly] = s
                keep = failed >= 0
                nxt[keep] = cur[keep]
                cur = nxt
                if next_rec < len(rec) and rec[next_rec] == s + 1:
                    out[:, next_rec] = cur
                    next_rec += 1
    return rec * h, out, failed


def integrate_ensemble(model: LangevinModel, z0, T: float, h: float,
                       driver: WienerDriver, path_ids=None, scheme: str = "euler_heun",
                       record_every: int = 1, threads: int = 1,
                       backend: str = "auto", tol: float = 1e-12,
                       max_iter: int = 50, n_paths: Optional[int] = None) -> EnsembleResult:
    """Integrate many paths; results depend only on (seed, path id).

    `z0` may be a single point (shared by all `n_paths`) or an (N, 2n)
    array.  Failed paths freeze at their last finite state and are flagged.
    `threads` only splits work across path chunks; the per-path arithmetic
    is elementwise, so outputs are identical for any thread count.
    """
    arr, single = as_points(z0, model.dim)
    if single:
        if n_paths is None:
            if path_ids is None:
                raise ValueError("give n_paths or path_ids when z0 is a single point")
            n_paths = len(path_ids)
        arr = np.broadcast_to(arr[0], (n_paths, model.dim)).copy()
    P = arr.shape[0]
    if path_ids is None:
        path_ids = np.arange(P)
    path_ids = np.asarray(path_ids)
    if path_ids.shape[0] != P:
        raise ValueError("path_ids/initial state count mismatch")
    N = _step_count(T, h)

    stepper = _resolve_kernel(model, scheme, backend)
    runner = stepper if stepper is not None else _integrate_chunk_python

    chunks = []
    chunk_size = max(1, (P + max(1, threads) - 1) // max(1, threads))
    for lo in range(0, P, chunk_size):
        hi = min(lo + chunk_size, P)
        chunks.append((lo, hi))

    def run(chunk):
        lo, hi = chunk
        return runner(model, arr[lo:hi], N, h, driver, path_ids[lo:hi],
                      scheme, record_every, tol, max_iter)

    if threads > 1 and len(chunks) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    times = results[0][0]
    states = np.concatenate([r[1] for r in results], axis=0)
    failed = np.concatenate([r[2] for r in results], axis=0)
    meta = {"scheme": scheme, "h": h, "seed": driver.seed, "T": T,
            "backend": "compiled" if stepper is not None else "python",
            "record_every": record_every}
    return EnsembleResult(times, states, failed, meta)


def _resolve_kernel(model, scheme, backend):
    if model.kernel_name is None:
        return None
    mod = _backend.kernels(backend)
    if mod is None:
        return None
    return _backend.ensemble_stepper(mod, model, scheme)


def integrate_pair(model: LangevinModel, zA0, zB0, T: float, h: float,
                   driver: WienerDriver, pair_id: int, scheme: str = "euler_heun",
                   tol: float = 1e-12, max_iter: int = 50):
    """Propagate two particles through the same noise realization.

    Both receive identical increments per (step, channel), keyed by
    `pair_id`; marginally each trajectory is bitwise what `integrate`
    produces for path_id = pair_id.
    """
    a0, _ = as_points(zA0, model.dim)
    b0, _ = as_points(zB0, model.dim)
    N = _step_count(T, h)
    gen = model.drift.generator if model.drift.hamiltonian else None

    def record(Z, step):
        e = float(gen.value(Z)) if gen is not None else None
        return PathState(Z.copy(), step * h, step, e)

    Z = np.vstack([a0, b0])
    states_a = [record(Z[0], 0)]
    states_b = [record(Z[1], 0)]
    for step in range(N):
        dW1 = driver.increments(pair_id, step, step + 1, h)  # (1, K)
        dW = np.repeat(dW1, 2, axis=0)
        if scheme == "euler_heun":
            Z = _euler_heun_batch(model, Z, h, dW)
        elif scheme == "midpoint":
            Z, _, conv = _midpoint_batch(model, Z, h, dW, tol, max_iter)
            if not np.all(conv):
                raise MidpointError(f"step {step}: midpoint did not converge",
                                    z=Z, h=h, dW=dW)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        if not np.all(np.isfinite(Z)):
            raise StepError(f"step {step}: non-finite state", z=Z, h=h, dW=dW)
        states_a.append(record(Z[0], step + 1))
        states_b.append(record(Z[1], step + 1))
    return states_a, states_b


@dataclass
class PairEnsembleResult:
    times: np.ndarray
    states_a: np.ndarray
    states_b: np.ndarray
    failed_step: np.ndarray
    meta: dict = field(default_factory=dict)


def integrate_pairs_ensemble(model: LangevinModel, ZA0, ZB0, T: float, h: float,
                             driver: WienerDriver, pair_ids=None,
                             scheme: str = "euler_heun", record_every: int = 1,
                             threads: int = 1, tol: float = 1e-12,
                             max_iter: int = 50) -> PairEnsembleResult:
    """Shared-noise propagation of many pairs (A and B stacked as one
    double-size ensemble whose two halves draw identical increments)."""
    A, _ = as_points(ZA0, model.dim)
    B, _ = as_points(ZB0, model.dim)
    if A.shape != B.shape:
        raise ValueError("pair initial-state arrays must match")
    P = A.shape[0]
    if pair_ids is None:
        pair_ids = np.arange(P)
    pair_ids = np.asarray(pair_ids)
    stacked = np.concatenate([A, B], axis=0)
    ids = np.concatenate([pair_ids, pair_ids])
    res = integrate_ensemble(model, stacked, T, h, driver, ids, scheme,
                             record_every, threads, backend="python",
                             tol=tol, max_iter=max_iter)
    failed = np.maximum(res.failed_step[:P], res.failed_step[P:])
    return PairEnsembleResult(res.times, res.states[:P], res.states[P:], failed,
                              dict(res.meta))
