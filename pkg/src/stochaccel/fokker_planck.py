"""Generator-level consistency oracles for Langevin models.

No density grids anywhere: the one- and two-particle evolution laws are
verified through their generator coefficients (Ito drift and diffusion),
the two-point cross-diffusion tensor, closed-form moment evolution for the
constant-coefficient pulse model, and short-time expectations of test
observables.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .noise_basis import SampleSet, covariance_pairs
from .phase_space import ScalarField, as_points
from .sde import LangevinModel


@dataclass
class GeneratorCoefficients:
    """Ito drift a + (1/2) sum_k (grad b_k) b_k and diffusion
    (1/2) sum_k b_k (x) b_k of a Stratonovich model."""

    model: LangevinModel

    def ito_drift(self, z):
        arr, single = as_points(z, self.model.dim)
        out = self.model.drift._eval(arr).copy()
        for b in self.model.noise_fields:
            jac = b._jacobian(arr)
            val = b._eval(arr)
            out += 0.5 * np.einsum("mij,mj->mi", jac, val)
        return out[0] if single else out

    def diffusion(self, z):
        arr, single = as_points(z, self.model.dim)
        out = np.zeros((arr.shape[0], self.model.dim, self.model.dim))
        for b in self.model.noise_fields:
            val = b._eval(arr)
            out += 0.5 * np.einsum("mi,mj->mij", val, val)
        return out[0] if single else out


def generator_coefficients(model: LangevinModel) -> GeneratorCoefficients:
    """Stratonovich-to-Ito conversion of a model's coefficients."""
    return GeneratorCoefficients(model)


def cross_diffusion(model: LangevinModel, z1, z2):
    """sum_k b_k(z1) (x) b_k(z2); at z1 = z2 this is twice the diffusion."""
    a1, single1 = as_points(z1, model.dim)
    a2, single2 = as_points(z2, model.dim)
    if a1.shape != a2.shape:
        raise ValueError("z1/z2 batch shapes must match")
    out = np.zeros((a1.shape[0], model.dim, model.dim))
    for b in model.noise_fields:
        out += np.einsum("mi,mj->mij", b._eval(a1), b._eval(a2))
    return out[0] if (single1 and single2) else out


def cross_diffusion_residual(model: LangevinModel,
                             alpha_source: Union[SampleSet, Callable],
                             scale: float, test_pairs) -> float:
    """Max relative Frobenius mismatch between the model's cross-diffusion
    and `scale` times the covariance tensor over the test pairs.

    `alpha_source` is either a SampleSet (empirical covariance) or a
    callable (z1, z2) -> (2n, 2n).
    """
    z1 = np.asarray([p[0] for p in test_pairs], dtype=np.float64)
    z2 = np.asarray([p[1] for p in test_pairs], dtype=np.float64)
    if isinstance(alpha_source, SampleSet):
        alpha = covariance_pairs(alpha_source, z1, z2)
    else:
        alpha = np.stack([np.asarray(alpha_source(a, b)) for a, b in zip(z1, z2)])
    target = scale * alpha
    got = cross_diffusion(model, z1, z2)
    num = np.linalg.norm(got - target, axis=(1, 2))
    den = np.linalg.norm(target, axis=(1, 2))
    return float(np.max(num / den))


@dataclass
class Example1Moments:
    """First and second per-component moments of the pulse model (each entry
    a length-3 array over components)."""

    mean_x: np.ndarray
    mean_v: np.ndarray
    var_x: np.ndarray
    cov_xv: np.ndarray
    var_v: np.ndarray

    @classmethod
    def point(cls, z0):
        z0 = np.asarray(z0, dtype=np.float64)
        zero = np.zeros(3)
        return cls(z0[:3].copy(), z0[3:].copy(), zero.copy(), zero.copy(), zero.copy())


def example1_moment_odes(m0: float, m1: float, tau: float,
                         initial: Example1Moments, t: float) -> Example1Moments:
    """Closed-form moment evolution of the constant-coefficient pulse model.

    With sx = m1/sqrt(3 tau), sv = m0/sqrt(3 tau) and shared channel noise
    per component:

        Var v  (t) = Var v(0) + sv^2 t
        Cov xv (t) = Cov(0) + Var v(0) t + sv^2 t^2/2 + sx sv t
        Var x  (t) = Var x(0) + 2 Cov(0) t + Var v(0) t^2 + sv^2 t^3/3
                     + sx sv t^2 + sx^2 t
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    sx = m1 / np.sqrt(3.0 * tau)
    sv = m0 / np.sqrt(3.0 * tau)
    mean_x = initial.mean_x + initial.mean_v * t
    mean_v = initial.mean_v.copy()
    var_v = initial.var_v + sv * sv * t
    cov = initial.cov_xv + initial.var_v * t + 0.5 * sv * sv * t * t + sx * sv * t
    var_x = (initial.var_x + 2.0 * initial.cov_xv * t + initial.var_v * t * t
             + sv * sv * t ** 3 / 3.0 + sx * sv * t * t + sx * sx * t)
    return Example1Moments(mean_x, mean_v, var_x, cov, var_v)


def generator_apply(model: LangevinModel, test_function: ScalarField, z):
    """The generator acting on an observable:
    a_ito . grad(phi) + diffusion : hess(phi) at z."""
    arr, single = as_points(z, model.dim)
    coeffs = generator_coefficients(model)
    a = coeffs.ito_drift(arr)
    D = coeffs.diffusion(arr)
    g = test_function._gradient(arr)
    H = test_function._hessian(arr)
    out = np.sum(a * g, axis=-1) + np.einsum("mij,mij->m", D, H)
    return out[0] if single else out


def drift_divergence(model: LangevinModel, z):
    """Divergence of the Stratonovich drift (zero for Hamiltonian drifts in
    canonical coordinates)."""
    arr, single = as_points(z, model.dim)
    jac = model.drift._jacobian(arr)
    out = np.trace(jac, axis1=-2, axis2=-1)
    return out[0] if single else out
