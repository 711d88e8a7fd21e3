"""Non-negative RESCAL factorization toolkit with automatic model selection.

Approximates a relational tensor by X_t ~= A R_t A^T with non-negative
factors, estimates the number of latent communities from the stability of
perturbation ensembles, and runs the same algorithms serially or on an
in-process 2D grid of ranks with deterministic collectives.
"""

from .errors import (
    DataError,
    GridDeadlockError,
    GridError,
    NumericalError,
    RescalkitError,
)
from .tensor import (
    RelTensor,
    SparseRelTensor,
    TensorBlock,
    fro_norm,
    load_matrix,
    load_tensor,
    partition,
    partition_block,
    reassemble,
    save_matrix,
    save_tensor,
)
from .rescal import (
    RescalFactors,
    SolverConfig,
    finalize_normalize,
    nndsvd_init,
    random_init,
    regress_r,
    rel_error,
    rescal_solve,
    update_a,
    update_r,
)
from .grid import CollectiveStats, GridContext, KernelCounters, dist_mm, spawn_grid
from .dist_rescal import (
    DistFactors,
    PerturbConfig,
    dist_perturb,
    dist_rescal_solve,
    gather_factors,
    perturb,
    solve_on_grid,
)
from .model_select import (
    ClusterResult,
    FactorEnsemble,
    SelectionReport,
    SilhouetteStats,
    best_match_diagonal,
    cluster_stability,
    custom_cluster,
    lsa,
    pearson_correlation,
    rescalk,
    select_k,
)
from .synth import PRESET_SHAPES, SynthSpec, generate, sparsify
from .perf import (
    CostModelInput,
    CostPrediction,
    HarnessConfig,
    InstrumentedRun,
    ScalingRecord,
    isoefficiency,
    measure_counts,
    predict_cost,
    run_instrumented,
    scaling_harness,
    write_scaling_csv,
)

__version__ = "0.1.0"
