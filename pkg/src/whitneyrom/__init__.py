"""Structure-preserving reduced finite elements.

Coarse Whitney-form complexes (0- and 1-forms) are built from a fine P1
simplicial mesh through a learned convex-combination matrix, giving reduced
models that keep a discrete de Rham structure: partition of unity, exact
gradient representation, and telescoping (machine-precision) conservation.
Nonlinear closures are cross-attention networks trained by forward/adjoint
optimization of solved conservation laws.
"""

from .mesh import (
    MeshError,
    MeshFormatError,
    SimplicialMesh,
    NodalField,
    AdvectionDiffusion,
    PointCharge,
    build_interval_mesh,
    build_structured_tri_mesh,
    build_disk_mesh,
    load_mesh,
    save_mesh,
    assemble_fine_mass0,
    assemble_fine_whitney1_mass,
    assemble_fine_stiffness,
    assemble_fine_edge_areas,
    reference_solve,
    eval_p1,
    p1_basis_matrix,
)
from .autodiff import AutodiffError, Tape, Tensor, grad_check
from .complexes import (
    ComplexError,
    LiftLayout,
    ConvexCombination,
    FineOperators,
    CoarseComplex,
    ConservationReport,
    canonical_pairs,
    split_dirichlet,
    coarsen_mass0,
    coarsen_mass1,
    graph_gradient,
    hodge_laplacian,
    build_coarse_complex,
    evaluate_shape_matrix,
    project_gradient,
    conservation_report,
    poincare_constant,
)
from .nets import ModelConfig, ModelParams, init_params
from .solver import (
    SolverError,
    ResidualSystem,
    NewtonResult,
    WellPosednessReport,
    build_system,
    assemble_residual,
    newton_solve,
    data_loss,
    adjoint_solve,
    parameter_gradient,
    wellposedness_diagnostic,
)
from .trainer import (
    TrainerError,
    TrainingSample,
    EvalCase,
    TrainingProblem,
    TrainState,
    FitResult,
    initial_state,
    train_step,
    fit,
    save_checkpoint,
    load_checkpoint,
    evaluate_errors,
)
from .bench import (
    BenchError,
    UnknownBenchmarkError,
    BENCHMARK_NAMES,
    SodState,
    analytic_ad1d,
    regression_target,
    sod_exact,
    export_csv,
    parse_config,
    BenchmarkSpec,
    benchmark_spec,
    run_benchmark,
)

__version__ = "0.1.0"

__all__ = [
    "MeshError", "MeshFormatError", "SimplicialMesh", "NodalField",
    "AdvectionDiffusion", "PointCharge", "build_interval_mesh",
    "build_structured_tri_mesh", "build_disk_mesh", "load_mesh", "save_mesh",
    "assemble_fine_mass0", "assemble_fine_whitney1_mass",
    "assemble_fine_stiffness", "assemble_fine_edge_areas", "reference_solve",
    "eval_p1", "p1_basis_matrix",
    "AutodiffError", "Tape", "Tensor", "grad_check",
    "ComplexError", "LiftLayout", "ConvexCombination", "FineOperators",
    "CoarseComplex", "ConservationReport", "canonical_pairs",
    "split_dirichlet", "coarsen_mass0", "coarsen_mass1", "graph_gradient",
    "hodge_laplacian", "build_coarse_complex", "evaluate_shape_matrix",
    "project_gradient", "conservation_report", "poincare_constant",
    "ModelConfig", "ModelParams", "init_params",
    "SolverError", "ResidualSystem", "NewtonResult", "WellPosednessReport",
    "build_system", "assemble_residual", "newton_solve", "data_loss",
    "adjoint_solve", "parameter_gradient", "wellposedness_diagnostic",
    "TrainerError", "TrainingSample", "EvalCase", "TrainingProblem",
    "TrainState", "FitResult", "initial_state", "train_step", "fit",
    "save_checkpoint", "load_checkpoint", "evaluate_errors",
    "BenchError", "UnknownBenchmarkError", "BENCHMARK_NAMES", "SodState",
    "analytic_ad1d", "regression_target", "sod_exact", "export_csv",
    "parse_config", "BenchmarkSpec", "benchmark_spec", "run_benchmark",
]
