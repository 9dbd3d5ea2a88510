"""Selection of the compiled kernel extension.

The Cython extension `stochaccel._kernels` accelerates the hot inner
loops (Karney micro integration and the Karney SDE steppers).  It is
optional: when missing, every code path falls back to the vectorized
numpy implementation.  Selection order:

  1. explicit `backend=` argument ("python" | "compiled" | "auto"),
  2. the STOCHACCEL_BACKEND environment variable,
  3. default "auto" (compiled when importable).

Within one backend, results are bitwise reproducible and independent of
worker count; across backends they agree to floating-point roundoff (the
two implementations order a handful of reductions differently).
"""
from __future__ import annotations

import os

import numpy as np

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on build environment
    _compiled = None

_CHOICES = ("auto", "python", "compiled")


def available() -> bool:
    return _compiled is not None


def resolve(backend: str = "auto") -> str:
    """Normalize a backend request to "python" or "compiled"."""
    if backend in (None, "auto"):
        backend = os.environ.get("STOCHACCEL_BACKEND", "auto")
    if backend not in _CHOICES:
        raise ValueError(f"backend must be one of {_CHOICES}, got {backend!r}")
    if backend == "auto":
        return "compiled" if _compiled is not None else "python"
    if backend == "compiled" and _compiled is None:
        raise RuntimeError("compiled kernels requested but the extension is not built")
    return backend


def kernels(backend: str = "auto"):
    """The kernel module, or None when the python path should be used."""
    return _compiled if resolve(backend) == "compiled" else None


def ensemble_stepper(mod, model, scheme):
    """A chunk-integrator backed by `mod` for this model, or None.

    The returned callable matches the python chunk integrator signature
    used by `sde.integrate_ensemble`.
    """
    if model.kernel_name != "karney_sde" or scheme not in ("euler_heun", "midpoint"):
        return None
    p = model.kernel_params
    scheme_id = 0 if scheme == "euler_heun" else 1

    def run_chunk(model_, Z0, N, h, driver, path_ids, scheme_, record_every,
                  tol, max_iter):
        P = Z0.shape[0]
        rec = np.arange(0, N + 1, record_every)
        if rec[-1] != N:
            rec = np.append(rec, N)
        records = np.empty((P, len(rec), 2))
        records[:, 0] = Z0
        failed = np.full(P, -1, dtype=np.int64)
        cur = np.ascontiguousarray(Z0, dtype=np.float64)
        block = 256
        next_rec = 1
        for lo in range(0, N, block):
            hi = min(lo + block, N)
            dW = np.ascontiguousarray(driver.increments_block(path_ids, lo, hi, h))
            rec_cols = np.full(hi - lo, -1, dtype=np.int64)
            while next_rec < len(rec) and rec[next_rec] <= hi:
                rec_cols[rec[next_rec] - lo - 1] = next_rec
                next_rec += 1
            mod.karney_sde_block(
                cur, dW, h, scheme_id, tol, max_iter,
                p["n0"], p["noise_coef"], p["drift_scale"],
                p["n_lo"], np.asarray(p["g_list"], dtype=np.float64),
                p["table_start"], p["table_nmax"], p["i_min"], p["u_max"],
                failed, lo, rec_cols, records)
        return rec * h, records, failed

    return run_chunk


def micro_kernel(backend: str = "auto"):
    """The compiled Karney micro integrator, or None."""
    mod = kernels(backend)
    return None if mod is None else mod.karney_micro
