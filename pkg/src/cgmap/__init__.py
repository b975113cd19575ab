"""Channel-gain cartography from hybrid location/pilot-feature data.

A gated mixture of two kernel experts learns the gain between any two
radio terminals: one expert works on (possibly wrong) location estimates,
the other on location-free pilot features, and a learned monotone gate
weighs them by the pair's reported localization uncertainty. Includes a
2-D multipath ray tracer for synthetic scenes, dataset tooling, training,
evaluation sweeps, and a CLI (`cgmap`).
"""

from .features import (
    DEFAULT_LAG_STEP,
    DatasetConfig,
    PairSample,
    SensorRecord,
    com_feature,
    extract_feature_vector,
    generate_dataset,
    read_pairs_csv,
    read_records_csv,
    synth_localization,
    write_pairs_csv,
    write_records_csv,
)
from .gating import (
    GatingSolution,
    OrderDag,
    QpConvergenceError,
    build_order_dag,
    canonical_error_pair,
    gating_interpolate,
    solve_gating_qp,
    transitive_reduction,
)
from .kernel_core import (
    ExpertHyperparams,
    KernelExpert,
    SingularSystemError,
    joint_expert_solve,
    kernel_matrix,
    krr_fit,
    rbf_kernel,
)
from .propagation import (
    NO_COVERAGE,
    Environment,
    ImpulseResponse,
    Point2,
    RegionBounds,
    Wall,
    bundled_scene_path,
    channel_gain_db,
    environment_to_dict,
    load_scene,
    save_scene,
    scene_from_dict,
    trace_paths,
)
from .trainer import (
    CvConfig,
    MoEModel,
    MoeHyperparams,
    TrainOptions,
    UnestimableQueryError,
    augment_symmetric,
    cv_grid_search,
    eval_objective,
    load_model,
    predict_cg,
    save_model,
    train_moe,
)
from .experiments import (
    ESTIMATOR_NAMES,
    ExperimentConfig,
    derive_seed,
    export_map_slices,
    fit_moe,
    fit_standalone,
    nmse_eval,
    resolve_scene,
    run_nmse_sweep,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_LAG_STEP",
    "DatasetConfig",
    "PairSample",
    "SensorRecord",
    "com_feature",
    "extract_feature_vector",
    "generate_dataset",
    "read_pairs_csv",
    "read_records_csv",
    "synth_localization",
    "write_pairs_csv",
    "write_records_csv",
    "GatingSolution",
    "OrderDag",
    "QpConvergenceError",
    "build_order_dag",
    "canonical_error_pair",
    "gating_interpolate",
    "solve_gating_qp",
    "transitive_reduction",
    "ExpertHyperparams",
    "KernelExpert",
    "SingularSystemError",
    "joint_expert_solve",
    "kernel_matrix",
    "krr_fit",
    "rbf_kernel",
    "NO_COVERAGE",
    "Environment",
    "ImpulseResponse",
    "Point2",
    "RegionBounds",
    "Wall",
    "bundled_scene_path",
    "channel_gain_db",
    "environment_to_dict",
    "load_scene",
    "save_scene",
    "scene_from_dict",
    "trace_paths",
    "CvConfig",
    "MoEModel",
    "MoeHyperparams",
    "TrainOptions",
    "UnestimableQueryError",
    "augment_symmetric",
    "cv_grid_search",
    "eval_objective",
    "load_model",
    "predict_cg",
    "save_model",
    "train_moe",
    "ESTIMATOR_NAMES",
    "ExperimentConfig",
    "derive_seed",
    "export_map_slices",
    "fit_moe",
    "fit_standalone",
    "nmse_eval",
    "resolve_scene",
    "run_nmse_sweep",
    "__version__",
]
