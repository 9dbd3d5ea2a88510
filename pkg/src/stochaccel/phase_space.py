"""Canonical phase-space geometry.

Phase points are plain numpy arrays of even length 2n (n position-like
coordinates followed by n momentum-like ones).  Every evaluation accepts
either a single point of shape (2n,) or a batch of shape (..., 2n) and
returns results with matching leading shape; batched evaluation performs
the same elementwise arithmetic as single-point evaluation, so results do
not depend on how points are grouped.

The Poisson structure is the constant canonical one throughout: the
symplectic matrix is J = [[0, I], [-I, 0]] and a Hamiltonian vector field
is X_H = J grad(H).
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

# Central finite-difference step, relative to per-coordinate scale.
FD_STEP = 1e-5


class FlowError(RuntimeError):
    """Integration blow-up; carries the time at which it was detected."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


def as_points(z, dim=None):
    """Validate phase points and return (array2d, single_flag)."""
    arr = np.asarray(z, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"phase points must have shape (2n,) or (M, 2n), got {arr.shape}")
    if arr.shape[1] % 2 != 0:
        raise ValueError(f"phase-space dimension must be even, got {arr.shape[1]}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {arr.shape[1]}")
    return arr, single


def symplectic_matrix(dim: int) -> np.ndarray:
    """The canonical J with block structure [[0, I], [-I, 0]]."""
    n = dim // 2
    J = np.zeros((dim, dim))
    J[:n, n:] = np.eye(n)
    J[n:, :n] = -np.eye(n)
    return J


def jmul(v):
    """Apply J to the trailing axis of `v` without materializing J."""
    v = np.asarray(v)
    n = v.shape[-1] // 2
    out = np.empty_like(v)
    out[..., :n] = v[..., n:]
    out[..., n:] = -v[..., :n]
    return out


class ScalarField:
    """A scalar function on phase space with an exact gradient.

    Subclasses implement `_value` and `_gradient` on 2-D batches.  The
    `provenance` tag records how derivatives are obtained: "analytic"
    fields promise gradient/finite-difference agreement, while
    "sample-combination" fields differentiate through a stored linear
    combination and "interpolated" fields fall back to finite differences.
    """

    dim: int
    provenance: str = "analytic"
    name: str = ""

    def value(self, z):
        arr, single = as_points(z, self.dim)
        out = self._value(arr)
        return out[0] if single else out

    def gradient(self, z):
        arr, single = as_points(z, self.dim)
        out = self._gradient(arr)
        return out[0] if single else out

    def hessian(self, z):
        arr, single = as_points(z, self.dim)
        out = self._hessian(arr)
        return out[0] if single else out

    def _value(self, Z):
        raise NotImplementedError

    def _gradient(self, Z):
        raise NotImplementedError

    def _hessian(self, Z):
        # central differences of the gradient; subclasses override when
        # an analytic Hessian is available
        return _fd_jacobian(self._gradient, Z)

    def __repr__(self):
        label = self.name or type(self).__name__
        return f"<{label} dim={self.dim} provenance={self.provenance}>"


class CallableField(ScalarField):
    def __init__(self, dim, value, gradient, hessian=None,
                 provenance="analytic", name=""):
        self.dim = dim
        self._value_fn = value
        self._gradient_fn = gradient
        self._hessian_fn = hessian
        self.provenance = provenance
        self.name = name

    def _value(self, Z):
        return np.asarray(self._value_fn(Z), dtype=np.float64)

    def _gradient(self, Z):
        return np.asarray(self._gradient_fn(Z), dtype=np.float64)

    def _hessian(self, Z):
        if self._hessian_fn is not None:
            return np.asarray(self._hessian_fn(Z), dtype=np.float64)
        return super()._hessian(Z)


class ConstantField(ScalarField):
    def __init__(self, dim, c, name=""):
        self.dim = dim
        self.c = float(c)
        self.name = name

    def _value(self, Z):
        return np.full(Z.shape[0], self.c)

    def _gradient(self, Z):
        return np.zeros_like(Z)

    def _hessian(self, Z):
        return np.zeros((Z.shape[0], self.dim, self.dim))


class LinearField(ScalarField):
    """a . z + c; the workhorse for pulse-kick Hamiltonians."""

    def __init__(self, a, c=0.0, name=""):
        self.a = np.asarray(a, dtype=np.float64)
        self.c = float(c)
        self.dim = self.a.shape[0]
        self.name = name

    def _value(self, Z):
        return Z @ self.a + self.c

    def _gradient(self, Z):
        return np.broadcast_to(self.a, Z.shape).copy()

    def _hessian(self, Z):
        return np.zeros((Z.shape[0], self.dim, self.dim))


class CombinationField(ScalarField):
    """Fixed linear combination sum_j c_j f_j of stored fields.

    Gradients differentiate through the combination, never through an
    interpolant, so combinations of analytic fields stay exactly
    differentiable.
    """

    def __init__(self, coeffs, fields: Sequence[ScalarField], name=""):
        if len(coeffs) != len(fields):
            raise ValueError("coefficient/field count mismatch")
        if not fields:
            raise ValueError("empty combination")
        self.coeffs = np.asarray(coeffs, dtype=np.float64)
        self.fields = list(fields)
        self.dim = fields[0].dim
        self.provenance = "sample-combination"
        self.name = name

    def _value(self, Z):
        out = np.zeros(Z.shape[0])
        for c, f in zip(self.coeffs, self.fields):
            if c != 0.0:
                out += c * f._value(Z)
        return out

    def _gradient(self, Z):
        out = np.zeros_like(Z)
        for c, f in zip(self.coeffs, self.fields):
            if c != 0.0:
                out += c * f._gradient(Z)
        return out


class TimeDependentField:
    """Scalar field with explicit time dependence, h(z, t)."""

    dim: int

    def value(self, z, t):
        raise NotImplementedError

    def gradient(self, z, t):
        raise NotImplementedError


class VectorField:
    """A phase-space vector field; `hamiltonian` marks fields of the form
    J grad(H) with retrievable generating ScalarField."""

    dim: int
    hamiltonian: bool = False
    generator: Optional[ScalarField] = None

    def eval(self, z):
        arr, single = as_points(z, self.dim)
        out = self._eval(arr)
        return out[0] if single else out

    def jacobian(self, z):
        arr, single = as_points(z, self.dim)
        out = self._jacobian(arr)
        return out[0] if single else out

    def _eval(self, Z):
        raise NotImplementedError

    def _jacobian(self, Z):
        return _fd_jacobian(self._eval, Z)


class HamiltonianVectorField(VectorField):
    hamiltonian = True

    def __init__(self, H: ScalarField):
        self.generator = H
        self.dim = H.dim

    def _eval(self, Z):
        return jmul(self.generator._gradient(Z))

    def _jacobian(self, Z):
        n = self.dim // 2
        hess = self.generator._hessian(Z)
        out = np.empty_like(hess)
        out[..., :n, :] = hess[..., n:, :]
        out[..., n:, :] = -hess[..., :n, :]
        return out


class CallableVectorField(VectorField):
    """Raw (not necessarily Hamiltonian) field from vectorized callables."""

    def __init__(self, dim, eval_fn, jacobian_fn=None, name=""):
        self.dim = dim
        self._eval_fn = eval_fn
        self._jacobian_fn = jacobian_fn
        self.name = name

    def _eval(self, Z):
        return np.asarray(self._eval_fn(Z), dtype=np.float64)

    def _jacobian(self, Z):
        if self._jacobian_fn is not None:
            return np.asarray(self._jacobian_fn(Z), dtype=np.float64)
        return super()._jacobian(Z)


def hamiltonian_vector_field(H: ScalarField) -> HamiltonianVectorField:
    """The canonical realization X_H = J grad(H)."""
    return HamiltonianVectorField(H)


def poisson_bracket(f: ScalarField, g: ScalarField, z):
    """Canonical bracket {f, g} = grad(f) . J grad(g) at `z`."""
    if f.dim != g.dim:
        raise ValueError(f"dimension mismatch between fields: {f.dim} != {g.dim}")
    arr, single = as_points(z, f.dim)
    out = np.sum(f._gradient(arr) * jmul(g._gradient(arr)), axis=-1)
    return out[0] if single else out


def _check_finite(Z, t):
    if not np.all(np.isfinite(Z)):
        raise FlowError(f"non-finite state at t={t!r}", time=t)


def flow(X: VectorField, z0, t: float, step_count: int = 16):
    """Advance z' = X(z) from `z0` by time `t` with `step_count` fixed RK4 steps."""
    if step_count < 1:
        raise ValueError("step_count must be >= 1")
    arr, single = as_points(z0, X.dim)
    if t == 0.0:
        return arr[0].copy() if single else arr.copy()
    h = t / step_count
    Z = arr.copy()
    for i in range(step_count):
        k1 = X._eval(Z)
        k2 = X._eval(Z + 0.5 * h * k1)
        k3 = X._eval(Z + 0.5 * h * k2)
        k4 = X._eval(Z + h * k3)
        Z = Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(Z, (i + 1) * h)
    return Z[0] if single else Z


def flow_with_jacobian(X: VectorField, z0, t: float, step_count: int = 16):
    """Flow together with the tangent map D(flow) of the discrete RK4 map.

    The tangent is the exact derivative of the numerical flow (RK4 applied
    to the variational system along the internal stages), so chain-rule
    gradients of pulled-back fields agree with finite differences of the
    same discrete flow to truncation accuracy.
    """
    if step_count < 1:
        raise ValueError("step_count must be >= 1")
    arr, single = as_points(z0, X.dim)
    M = np.broadcast_to(np.eye(X.dim), (arr.shape[0], X.dim, X.dim)).copy()
    if t == 0.0:
        return (arr[0].copy(), M[0]) if single else (arr.copy(), M)
    h = t / step_count
    Z = arr.copy()
    for i in range(step_count):
        z1 = Z
        k1 = X._eval(z1)
        z2 = Z + 0.5 * h * k1
        k2 = X._eval(z2)
        z3 = Z + 0.5 * h * k2
        k3 = X._eval(z3)
        z4 = Z + h * k3
        k4 = X._eval(z4)

        K1 = X._jacobian(z1) @ M
        K2 = X._jacobian(z2) @ (M + 0.5 * h * K1)
        K3 = X._jacobian(z3) @ (M + 0.5 * h * K2)
        K4 = X._jacobian(z4) @ (M + h * K3)

        Z = Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        M = M + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
        _check_finite(Z, (i + 1) * h)
    return (Z[0], M[0]) if single else (Z, M)


def pullback_eval(X: VectorField, lam: float, h: ScalarField, z, step_count: int = 16):
    """(exp(lam X)_* h)(z) = h evaluated at the time-(-lam) flow of `z`."""
    return h.value(flow(X, z, -lam, step_count))


class PullbackField(ScalarField):
    """Pullback of a time-slice of `h` along the background flow.

    value(z)    = h(Phi_{-lam}(z), t_h)
    gradient(z) = DPhi_{-lam}(z)^T grad_h(Phi_{-lam}(z), t_h)
    """

    def __init__(self, h: TimeDependentField, t_h: float, background: VectorField,
                 lam: float, step_count: int = 16):
        self.h = h
        self.t_h = float(t_h)
        self.background = background
        self.lam = float(lam)
        self.step_count = step_count
        self.dim = background.dim

    def _value(self, Z):
        zb = flow(self.background, Z, -self.lam, self.step_count)
        return np.asarray(self.h.value(zb, self.t_h), dtype=np.float64)

    def _gradient(self, Z):
        zb, M = flow_with_jacobian(self.background, Z, -self.lam, self.step_count)
        g = np.asarray(self.h.gradient(zb, self.t_h), dtype=np.float64)
        return np.einsum("mij,mi->mj", M, g)


def _fd_jacobian(fn, Z, step=FD_STEP):
    """Central-difference Jacobian of a batched vector map, fixed stencil."""
    m, d = Z.shape
    probe = fn(Z)
    out_dim = probe.shape[-1]
    out = np.empty((m, out_dim, d))
    scale = np.maximum(1.0, np.abs(Z))
    for j in range(d):
        dz = np.zeros_like(Z)
        dz[:, j] = step * scale[:, j]
        out[:, :, j] = (fn(Z + dz) - fn(Z - dz)) / (2.0 * step * scale[:, j][:, None])
    return out


def finite_difference_gradient(field: ScalarField, z, step=FD_STEP):
    """Central-difference gradient of a scalar field (test oracle)."""
    arr, single = as_points(z, field.dim)
    m, d = arr.shape
    out = np.empty((m, d))
    scale = np.maximum(1.0, np.abs(arr))
    for j in range(d):
        dz = np.zeros_like(arr)
        dz[:, j] = step * scale[:, j]
        out[:, j] = (field._value(arr + dz) - field._value(arr - dz)) / (2.0 * step * scale[:, j])
    return out[0] if single else out
