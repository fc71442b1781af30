"""Voxel SIMP topology optimization with a convolutional surrogate."""

__version__ = "0.1.0"

from .domain import (
    DesignDomain,
    DofMap,
    Load,
    ProblemSpec,
    build_domain,
    distribute_load,
    fixed_dofs_for_case,
    nodal_forces,
    reference_domain,
)
from .fea import (
    ConvergenceError,
    FeaModel,
    MaterialModel,
    compliance_and_sensitivity,
    element_stiffness,
    simp_modulus,
    solve_equilibrium,
)
from .simp import (
    FilterKernel,
    IterationTrace,
    SimpConfig,
    density_filter,
    oc_update,
    run_simp,
)
