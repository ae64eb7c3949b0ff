"""Volume estimation and sensor placement on sparsely labeled road networks.

The package splits into six parts: ``graph`` (data model, io, synthetic
benchmarks), ``autodiff`` (the reverse-mode tensor engine and Adam),
``model`` (the hybrid GCN/attention regressor), ``agent`` (the DQN
placement agent), ``baselines`` (centrality/random/activity placement and
tabular regressors), and ``experiments``/``cli`` (the multi-seed harness).
"""

from .agent import (
    AgentState,
    EpisodeResult,
    ExplorationPolicy,
    PlacementEnv,
    PolicyKind,
    QNet,
    ReplayBuffer,
    final_placement,
    train_agent,
)
from .baselines import (
    CentralityScores,
    LinearBaseline,
    MLPBaseline,
    PlacementStrategy,
    StrategyKind,
    TabularKind,
    betweenness,
    closeness,
    select_by_strategy,
    train_tabular,
)
from .errors import VolplaceError
from .experiments import (
    AgentSettings,
    CoverageReport,
    ExperimentConfig,
    MetricsReport,
    coverage_fixture,
    coverage_report,
    load_config,
    run_ablation,
    run_comparison,
    run_model_comparison,
)
from .graph import (
    NetworkGraph,
    RoadClass,
    RoadEdge,
    RoadNode,
    SensorPartition,
    SplitAssignment,
    SyntheticConfig,
    VolumeProcess,
    generate_synthetic,
    load_graph,
    make_partition,
    make_splits,
    save_graph,
)
from .metrics import Metrics, aggregate, bootstrap_mean_ci, compute_metrics
from .model import (
    HybridGNNRegressor,
    ModelConfig,
    TrainReport,
    init_params,
    predict,
    train,
    warm_finetune,
)

__version__ = "0.1.0"

__all__ = [
    "AgentSettings",
    "AgentState",
    "CentralityScores",
    "CoverageReport",
    "EpisodeResult",
    "ExperimentConfig",
    "ExplorationPolicy",
    "HybridGNNRegressor",
    "LinearBaseline",
    "MLPBaseline",
    "Metrics",
    "MetricsReport",
    "ModelConfig",
    "NetworkGraph",
    "PlacementEnv",
    "PlacementStrategy",
    "PolicyKind",
    "QNet",
    "ReplayBuffer",
    "RoadClass",
    "RoadEdge",
    "RoadNode",
    "SensorPartition",
    "SplitAssignment",
    "StrategyKind",
    "SyntheticConfig",
    "TabularKind",
    "TrainReport",
    "VolplaceError",
    "VolumeProcess",
    "aggregate",
    "betweenness",
    "bootstrap_mean_ci",
    "closeness",
    "compute_metrics",
    "coverage_fixture",
    "coverage_report",
    "final_placement",
    "generate_synthetic",
    "init_params",
    "load_config",
    "load_graph",
    "make_partition",
    "make_splits",
    "predict",
    "run_ablation",
    "run_comparison",
    "run_model_comparison",
    "save_graph",
    "select_by_strategy",
    "train",
    "train_agent",
    "train_tabular",
    "warm_finetune",
]
