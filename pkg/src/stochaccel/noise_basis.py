"""Noise-mode decomposition of the two-point covariance tensor.

The two-point covariance of the kick vector fields,

    alpha(z1, z2) = E[ X_{s1}(z1) (x) X_{s1}(z2) ],

is decomposed empirically by the snapshot method: eigendecompose the K x K
Gram matrix of sample kick fields in a weighted probe-grid inner product
and return modes as linear combinations of the samples.  Modes therefore
generate exactly Hamiltonian vector fields by construction.

Conventions: `build_basis` returns pairs (lambda_k, H_k) with the
eigenvalue scale absorbed into H_k, so that

    alpha(z1, z2) ~= sum_k X_{H_k}(z1) (x) X_{H_k}(z2)

holds with no extra weights and projection coefficients of fresh samples
onto the modes have unit empirical variance.  In the probe inner product
the modes satisfy <H_j, H_k> = lambda_k delta_jk; `unit_modes` rescales
them to an orthonormal family for diagnostics.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .kicks import S1Ensemble
from .phase_space import CombinationField, ScalarField, as_points, jmul

GRAM_CHUNK = 64  # probe-block size for Gram accumulation (fixed order)
EIG_REL_TOL = 1e-12


class BasisRankError(ValueError):
    """Requested rank exceeds the numerical rank of the sample Gram matrix
    (the sample set undersamples the requested number of modes)."""


@dataclass
class SampleSet:
    """Kick-field realizations plus the probe measure defining inner products."""

    fields: Sequence[ScalarField]
    probe_points: np.ndarray
    probe_weights: np.ndarray
    ensemble: Optional[S1Ensemble] = None

    def __post_init__(self):
        self.probe_points, _ = as_points(self.probe_points)
        self.probe_weights = np.asarray(self.probe_weights, dtype=np.float64)
        if len(self.fields) < 2:
            raise ValueError("need at least 2 sample realizations")
        if self.probe_weights.shape != (self.probe_points.shape[0],):
            raise ValueError("probe weight/point count mismatch")
        if not np.all(np.isfinite(self.probe_weights)) or np.any(self.probe_weights <= 0):
            raise ValueError("probe weights must be positive and finite")

    @property
    def dim(self):
        return self.probe_points.shape[1]

    def __len__(self):
        return len(self.fields)

    @classmethod
    def from_ensemble(cls, ensemble: S1Ensemble, probe_points, probe_weights):
        return cls(ensemble.fields(), probe_points, probe_weights, ensemble=ensemble)


def sample_field_vectors(samples: SampleSet, Z) -> np.ndarray:
    """X_{s} = J grad(s) for every sample at every point, shape (K, M, 2n)."""
    Z2, _ = as_points(Z, samples.dim)
    if samples.ensemble is not None and len(samples.ensemble) == len(samples.fields):
        grads = samples.ensemble.gradients(Z2)
    else:
        grads = np.stack([f.gradient(Z2) for f in samples.fields])
    return jmul(grads)


def covariance(z1, z2, samples: SampleSet) -> np.ndarray:
    """Empirical two-point covariance tensor at a single pair of points."""
    z1a, _ = as_points(z1, samples.dim)
    z2a, _ = as_points(z2, samples.dim)
    if z1a.shape[0] != 1 or z2a.shape[0] != 1:
        raise ValueError("covariance expects single points; see covariance_pairs")
    u1 = sample_field_vectors(samples, z1a)[:, 0, :]
    u2 = sample_field_vectors(samples, z2a)[:, 0, :]
    return np.einsum("ki,kj->ij", u1, u2) / len(samples)


def covariance_pairs(samples: SampleSet, pairs_z1, pairs_z2) -> np.ndarray:
    """Empirical covariance tensors at a batch of point pairs, (P, 2n, 2n)."""
    u1 = sample_field_vectors(samples, pairs_z1)
    u2 = sample_field_vectors(samples, pairs_z2)
    return np.einsum("kpi,kpj->pij", u1, u2) / len(samples)


@dataclass
class NoiseBasis:
    """Truncated noise-mode set: descending eigenvalues, modes as stored
    linear combinations of the sample kick fields."""

    eigenvalues: np.ndarray          # kept lambda_k, descending
    coefficients: np.ndarray         # (rank, K): H_k = sum_j c_kj s1_j
    modes: list                      # ScalarField per kept mode
    all_eigenvalues: np.ndarray      # full Gram spectrum, descending
    numerical_rank: int
    samples: SampleSet = field(repr=False)
    metadata: dict = field(default_factory=dict)

    @property
    def rank(self):
        return len(self.eigenvalues)

    def unit_modes(self):
        """Probe-orthonormal versions H_k / sqrt(lambda_k)."""
        return [CombinationField(row / np.sqrt(lam), self.samples.fields,
                                 name=f"mode[{k}]/sqrt(lam)")
                for k, (row, lam) in enumerate(zip(self.coefficients, self.eigenvalues))]

    def mode_vectors(self, Z) -> np.ndarray:
        """X_{H_k} at points Z, shape (rank, M, 2n)."""
        u = sample_field_vectors(self.samples, Z)
        return np.einsum("rk,kmi->rmi", self.coefficients, u)

    def mode_values(self, Z) -> np.ndarray:
        """H_k at points Z, shape (rank, M); uses the shared-flow ensemble
        fast path when available."""
        ens = self.samples.ensemble
        if ens is not None and len(ens) == len(self.samples.fields):
            vals = ens.values(Z)
        else:
            Z2, _ = as_points(Z, self.samples.dim)
            vals = np.stack([f.value(Z2) for f in self.samples.fields])
        return self.coefficients @ vals

    def reconstruct_pairs(self, pairs_z1, pairs_z2) -> np.ndarray:
        """sum_k X_{H_k}(z1) (x) X_{H_k}(z2) at a batch of pairs."""
        v1 = self.mode_vectors(pairs_z1)
        v2 = self.mode_vectors(pairs_z2)
        return np.einsum("rpi,rpj->pij", v1, v2)

    def coefficient_samples(self, samples: SampleSet) -> np.ndarray:
        """Projection coefficients of fresh samples onto the modes, (rank, Kf).

        Uncorrelated with unit variance when the modes span the samples.
        """
        u = sample_field_vectors(samples, self.samples.probe_points)
        v = self.mode_vectors(self.samples.probe_points)
        w = self.samples.probe_weights
        overlaps = np.einsum("rmi,kmi,m->rk", v, u, w)
        return overlaps / self.eigenvalues[:, None]


def _gram_matrix(samples: SampleSet) -> np.ndarray:
    """(1/K) <u_i, u_j> over the weighted probe grid, accumulated in fixed
    probe-block order."""
    K = len(samples)
    pts = samples.probe_points
    w = samples.probe_weights
    G = np.zeros((K, K))
    for lo in range(0, pts.shape[0], GRAM_CHUNK):
        hi = min(lo + GRAM_CHUNK, pts.shape[0])
        u = sample_field_vectors(samples, pts[lo:hi])           # (K, m, 2n)
        uw = u * np.sqrt(w[lo:hi])[None, :, None]
        flat = uw.reshape(K, -1)
        G += flat @ flat.T
    if not np.all(np.isfinite(G)):
        raise FloatingPointError("non-finite entries in sample Gram matrix")
    return G / K


def build_basis(samples: SampleSet, rank: Optional[int] = None,
                energy: float = 0.999) -> NoiseBasis:
    """Empirical KL decomposition of the sample kick fields.

    Either fix the `rank` explicitly or keep the smallest leading set of
    modes reaching the `energy` fraction of the Gram trace.  Eigenvalues
    below EIG_REL_TOL of the largest count as numerically zero.
    """
    K = len(samples)
    G = _gram_matrix(samples)
    evals, evecs = np.linalg.eigh(G)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    evals = np.maximum(evals, 0.0)

    if evals[0] <= 0.0:
        raise BasisRankError("all samples vanish on the probe grid")
    numerical_rank = int(np.sum(evals > EIG_REL_TOL * evals[0]))

    if rank is not None:
        if rank < 1:
            raise ValueError("rank must be >= 1")
        if rank > numerical_rank:
            raise BasisRankError(
                f"requested rank {rank} exceeds numerical rank {numerical_rank}; "
                "the sample set undersamples the requested modes")
        kept = rank
    else:
        total = float(np.sum(evals))
        cum = np.cumsum(evals) / total
        kept = int(np.searchsorted(cum, energy) + 1)
        kept = min(kept, numerical_rank)

    if samples.probe_points.shape[0] < kept:
        raise ValueError("probe grid smaller than number of requested modes")

    coeffs = (evecs[:, :kept] / np.sqrt(K)).T          # (kept, K)
    modes = [CombinationField(coeffs[k], samples.fields, name=f"mode[{k}]")
             for k in range(kept)]
    meta = {"samples": K, "energy_target": energy if rank is None else None,
            "trace": float(np.sum(evals))}
    return NoiseBasis(evals[:kept].copy(), coeffs, modes, evals, numerical_rank,
                      samples, meta)


def reconstruction_residual(basis: NoiseBasis, samples: SampleSet,
                            test_pairs) -> float:
    """Max over pairs of the relative Frobenius error between the empirical
    covariance of `samples` and the basis reconstruction."""
    z1 = np.asarray([p[0] for p in test_pairs], dtype=np.float64)
    z2 = np.asarray([p[1] for p in test_pairs], dtype=np.float64)
    alpha = covariance_pairs(samples, z1, z2)
    recon = basis.reconstruct_pairs(z1, z2)
    num = np.linalg.norm(alpha - recon, axis=(1, 2))
    den = np.linalg.norm(alpha, axis=(1, 2))
    return float(np.max(num / den))


def principal_angles(basis: NoiseBasis, reference_fields: Sequence[ScalarField]) -> np.ndarray:
    """Principal angles (radians) between the mode span and a reference span,
    both represented by field vectors on the weighted probe grid."""
    pts = basis.samples.probe_points
    w = np.sqrt(basis.samples.probe_weights)

    def span_matrix(vectors):
        flat = (vectors * w[None, :, None]).reshape(vectors.shape[0], -1)
        q, _ = np.linalg.qr(flat.T)
        return q

    va = basis.mode_vectors(pts)
    vb = jmul(np.stack([f.gradient(pts) for f in reference_fields]))
    qa = span_matrix(va)
    qb = span_matrix(vb)
    sv = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(sv, -1.0, 1.0))


def export_basis(basis: NoiseBasis, path, problem: Optional[dict] = None):
    """Write a JSON description sufficient to reconstruct the modes exactly:
    eigenvalues, combination coefficients, sampling seeds and probe grid."""
    ens = basis.samples.ensemble
    payload = {
        "format": "stochaccel-basis/1",
        "problem": problem or basis.metadata.get("problem"),
        "eigenvalues": basis.eigenvalues.tolist(),
        "all_eigenvalues": basis.all_eigenvalues.tolist(),
        "numerical_rank": basis.numerical_rank,
        "coefficients": basis.coefficients.tolist(),
        "probe_points": basis.samples.probe_points.tolist(),
        "probe_weights": basis.samples.probe_weights.tolist(),
        "sampling": None if ens is None else {
            "seed": ens.seed,
            "indices": ens.indices.tolist(),
            "nodes": ens.nodes,
            "flow_steps": ens.flow_steps,
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_basis(path, process_factory: Callable[[dict], object],
               background_factory: Callable[[dict], object]) -> NoiseBasis:
    """Rebuild an exported basis; factories map the stored problem block to
    a PerturbationProcess and its background vector field."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "stochaccel-basis/1":
        raise ValueError("not a stochaccel basis file")
    problem = payload["problem"]
    sampling = payload["sampling"]
    if problem is None or sampling is None:
        raise ValueError("basis file lacks the problem/sampling blocks needed "
                         "for exact reconstruction")
    process = process_factory(problem)
    background = background_factory(problem)
    ens = S1Ensemble(process, sampling["seed"], np.asarray(sampling["indices"]),
                     background, sampling["nodes"], sampling["flow_steps"])
    samples = SampleSet.from_ensemble(ens, np.asarray(payload["probe_points"]),
                                      np.asarray(payload["probe_weights"]))
    coeffs = np.asarray(payload["coefficients"])
    evals = np.asarray(payload["eigenvalues"])
    modes = [CombinationField(coeffs[k], samples.fields, name=f"mode[{k}]")
             for k in range(coeffs.shape[0])]
    return NoiseBasis(evals, coeffs, modes, np.asarray(payload["all_eigenvalues"]),
                      int(payload["numerical_rank"]), samples,
                      {"problem": problem})
