"""Non-Markovian quantum trajectories for small open systems in bosonic baths.

The reduced dynamics of a system coupled linearly to a Gaussian bath with
exponential correlation functions is unraveled into stochastic pure-state
trajectories.  Per realization, the driving operator closes through a
hierarchy of kernel-weighted functional-derivative operators; ensembles of
normalized trajectories average into the reduced density matrix.

Engines
-------
- :class:`~nmqsd.hierarchy_ou.OUHierarchyEngine`: production chain for
  single-exponential (Ornstein-Uhlenbeck) kernels.
- :class:`~nmqsd.hierarchy_general.GeneralHierarchyEngine`: multi-indexed
  hierarchy for arbitrary sum-of-exponentials kernels.
- :mod:`~nmqsd.oracles`: independent cross-validation engines (the
  doubly-indexed operator system, pure-state reconstruction, an exactly
  closing three-level model, and the memoryless master-equation limit).
"""

from .ensemble import EnsembleResult, count_equations, run_ensemble, termination_report
from .hierarchy_general import (
    GeneralHierarchyEngine,
    GeometricClosure,
    canonicalize,
    enumerate_keys,
    general_rhs,
    key_weight,
    subset_terms,
)
from .hierarchy_ou import (
    OUHierarchyEngine,
    TrajectoryResult,
    Truncation,
    expectation,
    hierarchy_rhs,
    trace_norm,
    trace_norms,
    trajectory_rhs,
)
from .model import (
    SystemSpec,
    ValidationReport,
    angular_momentum,
    pauli,
    qubit_decay_system,
    sigma_minus,
    spin_boson_system,
    three_level_system,
    validate_system,
)
from .noise import (
    CorrelationKernel,
    GirsanovMemory,
    NoisePath,
    girsanov_shift,
    sample_path,
    sample_paths,
    trajectory_seed,
    zero_path,
)
from .oracles import (
    ExactThreeLevelEngine,
    SdeHierarchyOracle,
    exact_three_level,
    hops_states,
    hops_states_direct,
    lindblad_oracle,
    propagate_joint_sde,
    reconstruction_weights,
    sde_keys,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "SystemSpec", "ValidationReport", "angular_momentum", "pauli", "sigma_minus",
    "three_level_system", "spin_boson_system", "qubit_decay_system", "validate_system",
    "CorrelationKernel", "NoisePath", "GirsanovMemory", "girsanov_shift",
    "sample_path", "sample_paths", "trajectory_seed", "zero_path",
    "Truncation", "OUHierarchyEngine", "TrajectoryResult", "expectation",
    "hierarchy_rhs", "trajectory_rhs", "trace_norm", "trace_norms",
    "GeneralHierarchyEngine", "GeometricClosure", "canonicalize", "enumerate_keys",
    "general_rhs", "key_weight", "subset_terms",
    "SdeHierarchyOracle", "propagate_joint_sde", "sde_keys", "reconstruction_weights",
    "hops_states", "hops_states_direct", "ExactThreeLevelEngine", "exact_three_level",
    "lindblad_oracle",
    "EnsembleResult", "run_ensemble", "count_equations", "termination_report",
]
