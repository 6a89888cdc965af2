"""Flow-matching policy toolkit with dense-jump inference and stability probes."""

from .errors import (
    CorruptCheckpoint,
    DegenerateGridPoint,
    DomainError,
    FlowDJError,
    IntegrationDiverged,
    IntegrityFailure,
    InvalidArgument,
    TrainingDiverged,
    UnsupportedVersion,
)
from .model import (
    AdamState,
    Checkpoint,
    NormStats,
    VelocityModel,
    eval_velocity,
    init_adam,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train_step,
)
from .training import (
    CouplingBatch,
    TimeSchedule,
    TrainConfig,
    beta_density,
    fit,
    make_coupling,
    sample_times,
)
from .solvers import (
    AnalyticField,
    SolverSchedule,
    Trajectory,
    build_schedule,
    constant_field,
    eval_analytic,
    exact_solution,
    integrate,
    marginal_field,
    state_time_field,
    time_poly_field,
)
from .diagnostics import (
    CurvatureEstimate,
    DriftReport,
    KnnIndex,
    LipschitzEstimate,
    build_knn_index,
    curvature_probe,
    drift_curves,
    lipschitz_probe,
    make_probe_pairs,
    truncation_probe,
)
from .tasks import (
    Dataset,
    RolloutResult,
    TaskSpec,
    default_task,
    evaluate,
    flow_policy,
    generate_dataset,
    load_dataset,
    rollout,
    save_dataset,
)

__version__ = "0.1.0"
