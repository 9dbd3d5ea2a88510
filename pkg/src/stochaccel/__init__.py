"""Hamiltonian Langevin models for stochastic acceleration.

Pipeline: kick Hamiltonians by quadrature along the background flow,
empirical noise-mode decomposition of their two-point covariance,
Stratonovich integration of the resulting Hamiltonian SDE, and
Fokker-Planck generator oracles for verification, including shared-noise
two-particle statistics.
"""

from . import _backend
from .bessel import bessel_j, bessel_j_table
from .fokker_planck import (
    Example1Moments,
    GeneratorCoefficients,
    cross_diffusion,
    cross_diffusion_residual,
    drift_divergence,
    example1_moment_odes,
    generator_apply,
    generator_coefficients,
)
from .kicks import (
    KickResult,
    PerturbationProcess,
    compute_s1,
    compute_s1_ensemble,
    compute_s2_mean,
)
from .models import (
    CounterexampleConfig,
    DomainError,
    KarneyConfig,
    KarneyPerturbation,
    PulsePerturbation,
    PulsePlasmaConfig,
    counterexample_model,
    example1_micro_ensemble,
    example1_micro_run,
    example1_model,
    example2_micro_ensemble,
    example2_micro_run,
    example2_model,
    karney_s2_secular,
    scalar_benchmark_model,
    synthesized_model,
)
from .noise_basis import (
    BasisRankError,
    NoiseBasis,
    SampleSet,
    build_basis,
    covariance,
    export_basis,
    load_basis,
    principal_angles,
    reconstruction_residual,
)
from .phase_space import (
    CallableField,
    CombinationField,
    FlowError,
    HamiltonianVectorField,
    LinearField,
    PullbackField,
    ScalarField,
    VectorField,
    flow,
    flow_with_jacobian,
    hamiltonian_vector_field,
    poisson_bracket,
    pullback_eval,
    symplectic_matrix,
)
from .sde import (
    EnsembleResult,
    LangevinModel,
    MidpointError,
    PathState,
    StepError,
    WienerDriver,
    euler_heun_step,
    integrate,
    integrate_ensemble,
    integrate_pair,
    integrate_pairs_ensemble,
    midpoint_step,
)
from .stats import (
    DispersionCurve,
    EnsembleSummary,
    WeakOrderFit,
    batch_se,
    dispersion_curve,
    estimate_moments,
    weak_order_fit,
)

__version__ = "0.1.0"

compiled_kernels_available = _backend.available
