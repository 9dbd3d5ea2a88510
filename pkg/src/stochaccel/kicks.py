"""Kick functions by quadrature along the background flow.

The interval kick Hamiltonians are

    s1 = int_0^tau (pullback by lam of h at time tau - lam) dlam
    s2 = (1/2) int_0^tau int_0^a { pullback_b h_{tau-b}, pullback_a h_{tau-a} } db da

with the pullback taken along the background Hamiltonian flow.  s1 is
represented as a Gauss-Legendre combination of pullback snapshots, which
keeps it exactly differentiable; the nested s2 integral maps a tensor
Gauss rule onto the triangle 0 <= b <= a <= tau (per-column affine map,
positive weights).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .phase_space import (
    ScalarField,
    TimeDependentField,
    VectorField,
    as_points,
    finite_difference_gradient,
    flow,
    flow_with_jacobian,
    jmul,
)


def gauss_legendre(n: int, a: float, b: float):
    """Nodes and weights of the n-point Gauss-Legendre rule on [a, b]."""
    if n < 2:
        raise ValueError("need at least 2 quadrature nodes")
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


class PerturbationProcess:
    """Family of random time-dependent perturbation Hamiltonians on [0, tau].

    Realizations are addressed as pure functions of (seed, index); `eps` is
    the nominal perturbation amplitude (never folded into the kick
    integrals themselves) and `tau_ac` documents the autocorrelation time.
    """

    dim: int
    eps: float = 1.0
    tau: float = 1.0
    tau_ac: float = 0.0

    def field(self, seed: int, index: int) -> TimeDependentField:
        raise NotImplementedError

    # Vectorized evaluation over realizations; the generic fallback loops.
    def values_at(self, seed, indices, Z, t):
        return np.stack([self.field(seed, int(i)).value(Z, t) for i in indices])

    def gradients_at(self, seed, indices, Z, t):
        return np.stack([self.field(seed, int(i)).gradient(Z, t) for i in indices])


class S1Field(ScalarField):
    """One realization of s1: quadrature combination of pullback snapshots.

    Gradients chain through the tangent map of the background flow, so the
    field is exactly differentiable (no interpolation anywhere).
    """

    def __init__(self, process: PerturbationProcess, seed: int, index: int,
                 background: VectorField, nodes: int, flow_steps: int = 8):
        self.process = process
        self.seed = int(seed)
        self.index = int(index)
        self.background = background
        self.nodes = nodes
        self.flow_steps = flow_steps
        self.dim = background.dim
        self.lams, self.weights = gauss_legendre(nodes, 0.0, process.tau)
        self.name = f"s1[{index}]"

    def _snapshots(self, Z, with_jacobian):
        tau = self.process.tau
        for lam, w in zip(self.lams, self.weights):
            if with_jacobian:
                zb, M = flow_with_jacobian(self.background, Z, -lam, self.flow_steps)
            else:
                zb, M = flow(self.background, Z, -lam, self.flow_steps), None
            yield w, tau - lam, zb, M

    def _value(self, Z):
        idx = np.array([self.index])
        out = np.zeros(Z.shape[0])
        for w, t_h, zb, _ in self._snapshots(Z, False):
            out += w * self.process.values_at(self.seed, idx, zb, t_h)[0]
        return out

    def _gradient(self, Z):
        idx = np.array([self.index])
        out = np.zeros_like(Z)
        for w, t_h, zb, M in self._snapshots(Z, True):
            g = self.process.gradients_at(self.seed, idx, zb, t_h)[0]
            out += w * np.einsum("mij,mi->mj", M, g)
        return out


class S1Ensemble:
    """A block of s1 realizations sharing seed, nodes and background flow.

    Evaluating the whole block at a batch of points shares the backward
    flows (which are realization independent), so covariance and Gram
    assembly scale with one flow per node instead of one per sample.
    """

    def __init__(self, process: PerturbationProcess, seed: int, indices,
                 background: VectorField, nodes: int, flow_steps: int = 8):
        self.process = process
        self.seed = int(seed)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.background = background
        self.nodes = nodes
        self.flow_steps = flow_steps
        self.dim = background.dim
        self.lams, self.weights = gauss_legendre(nodes, 0.0, process.tau)

    def __len__(self):
        return len(self.indices)

    def fields(self):
        return [S1Field(self.process, self.seed, int(i), self.background,
                        self.nodes, self.flow_steps) for i in self.indices]

    def gradients(self, Z):
        """Gradients of every realization at every point, shape (K, M, 2n)."""
        Z2, _ = as_points(Z, self.dim)
        tau = self.process.tau
        out = np.zeros((len(self.indices), Z2.shape[0], self.dim))
        for lam, w in zip(self.lams, self.weights):
            zb, M = flow_with_jacobian(self.background, Z2, -lam, self.flow_steps)
            g = self.process.gradients_at(self.seed, self.indices, zb, tau - lam)
            out += w * np.einsum("mij,kmi->kmj", M, g)
        return out

    def values(self, Z):
        Z2, _ = as_points(Z, self.dim)
        tau = self.process.tau
        out = np.zeros((len(self.indices), Z2.shape[0]))
        for lam, w in zip(self.lams, self.weights):
            zb = flow(self.background, Z2, -lam, self.flow_steps)
            out += w * self.process.values_at(self.seed, self.indices, zb, tau - lam)
        return out


def compute_s1(process: PerturbationProcess, background: VectorField,
               realization: int, nodes: int, seed: int = 0,
               flow_steps: int = 8) -> S1Field:
    """The kick Hamiltonian s1 for one perturbation realization."""
    if nodes < 2:
        raise ValueError("nodes must be >= 2")
    return S1Field(process, seed, realization, background, nodes, flow_steps)


def compute_s1_ensemble(process, background, realizations: int, nodes: int,
                        seed: int = 0, flow_steps: int = 8,
                        first_index: int = 0) -> S1Ensemble:
    """A block of s1 realizations with shared-flow batched evaluation."""
    if nodes < 2:
        raise ValueError("nodes must be >= 2")
    indices = np.arange(first_index, first_index + realizations)
    return S1Ensemble(process, seed, indices, background, nodes, flow_steps)


@dataclass
class KickResult:
    """Ensemble-mean kick diagnostics returned by `compute_s2_mean`."""

    s2_mean: ScalarField
    probe_points: Optional[np.ndarray]
    probe_mean: Optional[np.ndarray]
    probe_se: Optional[np.ndarray]
    metadata: dict = field(default_factory=dict)


class _S2MeanField(ScalarField):
    """Monte Carlo mean of s2 over realizations; values by nested quadrature.

    The value is exact quadrature per call; the gradient falls back to the
    documented central-difference stencil (tagged "interpolated"), since
    exact s2 gradients would require second variations of the flow.
    """

    provenance = "interpolated"

    def __init__(self, process, seed, indices, background, nodes, flow_steps):
        self.process = process
        self.seed = int(seed)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.background = background
        self.nodes = nodes
        self.flow_steps = flow_steps
        self.dim = background.dim
        self.name = "E[s2]"

    def realization_values(self, Z):
        """s2 per realization at each point, shape (R, M)."""
        Z2, _ = as_points(Z, self.dim)
        tau = self.process.tau
        a_nodes, a_w = gauss_legendre(self.nodes, 0.0, tau)
        xi_nodes, xi_w = gauss_legendre(self.nodes, 0.0, 1.0)
        acc = np.zeros((len(self.indices), Z2.shape[0]))
        for a, wa in zip(a_nodes, a_w):
            zb_a, M_a = flow_with_jacobian(self.background, Z2, -a, self.flow_steps)
            g_a = self.process.gradients_at(self.seed, self.indices, zb_a, tau - a)
            Fa = np.einsum("mij,kmi->kmj", M_a, g_a)
            JFa = jmul(Fa)
            for xi, wxi in zip(xi_nodes, xi_w):
                b = a * xi
                zb_b, M_b = flow_with_jacobian(self.background, Z2, -b, self.flow_steps)
                g_b = self.process.gradients_at(self.seed, self.indices, zb_b, tau - b)
                Fb = np.einsum("mij,kmi->kmj", M_b, g_b)
                # {F_b, F_a} = grad F_b . J grad F_a ; triangle weight wa*a*wxi
                acc += (0.5 * wa * a * wxi) * np.sum(Fb * JFa, axis=-1)
        if not np.all(np.isfinite(acc)):
            raise FloatingPointError("non-finite bracket values in s2 quadrature")
        return acc

    def _value(self, Z):
        return self.realization_values(Z).mean(axis=0)

    def _gradient(self, Z):
        return np.atleast_2d(finite_difference_gradient(self, Z))


def compute_s2_mean(process: PerturbationProcess, background: VectorField,
                    realizations: int, nodes: int, seed: int = 0,
                    probes=None, flow_steps: int = 8,
                    first_index: int = 0) -> KickResult:
    """Monte Carlo mean of s2 with per-probe standard errors.

    `realizations` sets the number of perturbation draws; `nodes` the
    Gauss-Legendre order per triangle direction.  When `probes` is given,
    per-realization values there are summarized with standard errors.
    """
    if realizations < 1:
        raise ValueError("realizations must be >= 1")
    if nodes < 2:
        raise ValueError("nodes must be >= 2")
    indices = np.arange(first_index, first_index + realizations)
    mean_field = _S2MeanField(process, seed, indices, background, nodes, flow_steps)
    probe_points = probe_mean = probe_se = None
    if probes is not None:
        probe_points, _ = as_points(probes, background.dim)
        vals = mean_field.realization_values(probe_points)
        probe_mean = vals.mean(axis=0)
        probe_se = vals.std(axis=0, ddof=1) / np.sqrt(realizations) if realizations > 1 \
            else np.zeros(probe_points.shape[0])
    meta = {"realizations": realizations, "nodes": nodes,
            "rule": "gauss-legendre x triangle-mapped gauss-legendre",
            "seed": int(seed), "flow_steps": flow_steps}
    return KickResult(mean_field, probe_points, probe_mean, probe_se, meta)
