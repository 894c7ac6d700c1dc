"""Multi-object tracking by exact min-cost-flow association with learned costs.

Candidate detections over a temporal window are linked by solving a unit
capacity min-cost flow (equivalent to the association linear program and
verified against an exhaustive oracle), and the cost functions producing
the objective coefficients are trained jointly through the solver with a
structured hinge loss.
"""

from .assoc import (
    Assignment,
    AssociationGraph,
    GateConfig,
    GoldAssignment,
    VariableLayout,
    build_graph,
    check_feasible,
    derive_gold,
    encode_trajectories,
)
from .baselines import AFFINITY_KINDS, ThresholdRule, affinity, fit_threshold, rule_error
from .core import (
    Box2D,
    Box3D,
    BoxTrack,
    CameraModel,
    Detection,
    EgoMotion,
    LabeledBox,
    TrackSequence,
    Trajectory,
    box2d_iou,
    decode_trajectories,
)
from .datagen import ScenarioConfig, generate, make_benchmark
from .errors import (
    ConfigError,
    DataFormatError,
    FlowTrackError,
    InfeasibleAssignmentError,
    NumericalError,
)
from .features import (
    BevConfig,
    FeatureConfig,
    FvConfig,
    GraphFeatures,
    OccupancyGrid,
    PairFeatures,
    compensate_ego,
    compute_graph_features,
    pair_features,
    rasterize_bev,
    rasterize_fv,
)
from .learning import (
    AdamState,
    HingeBatch,
    TrainConfig,
    TrainInstance,
    ValBundle,
    fit_match_classifier,
    hinge_gradient,
    hinge_loss,
    loss_augmented_solve,
    match_scorer_forward,
    prepare_instances,
    train_end_to_end,
    train_piecewise,
)
from .metrics import (
    MotReport,
    aggregate_reports,
    evaluate,
    matching_accuracy,
    trajectories_to_box_tracks,
)
from .scoring import (
    CostModel,
    DenseLayer,
    DetScorer,
    Gradient,
    MatchScorer,
    ScorerConfig,
    backward,
    init_model,
    score_graph,
)
from .solver import Solution, bellman_ford, build_network, solve, solve_exhaustive

__version__ = "0.1.0"
