"""Federated gradient-based neural architecture search simulator."""

from .config import ExperimentConfig
from .data import LabeledDataset, ShardPlan, generate_synthetic, iid_partition, partition_noniid
from .errors import CheckpointError, ConfigError, FednasError, NumericsError
from .estimator import FederatedNASClassifier
from .federation import (
    ClientState,
    EvalResult,
    MetricsRecord,
    TrainHyper,
    aggregate,
    client_update,
    clients_from_plan,
    evaluate,
    retrain_fedavg,
    run_search,
)
from .clustering import ClusterSpec, naive_group_search, run_cluster_refinement, split_clusters
from .latency import LatencyTable, load_latency_tables, save_latency_tables
from .ops import OpKind
from .supernet import (
    ArchParams,
    GateSample,
    NormalNet,
    ParamSet,
    SuperNetModel,
    alpha_gradient,
    count_flops_params,
    derive_normal_net,
    expected_latency,
    sample_gates,
    softmax_probs,
)

__all__ = [
    "ArchParams", "CheckpointError", "ClientState", "ClusterSpec", "ConfigError",
    "EvalResult", "ExperimentConfig", "FederatedNASClassifier", "FednasError",
    "GateSample", "LabeledDataset", "LatencyTable", "MetricsRecord", "NormalNet",
    "NumericsError", "OpKind", "ParamSet", "ShardPlan", "SuperNetModel",
    "TrainHyper", "aggregate", "alpha_gradient", "client_update",
    "clients_from_plan", "count_flops_params", "derive_normal_net", "evaluate",
    "expected_latency", "generate_synthetic", "iid_partition",
    "load_latency_tables", "naive_group_search", "partition_noniid",
    "retrain_fedavg", "run_cluster_refinement", "run_search", "sample_gates",
    "save_latency_tables", "softmax_probs", "split_clusters",
]

__version__ = "0.1.0"
