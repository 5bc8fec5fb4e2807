"""Balanced clustering by entropic optimal transport for few-shot learning."""

__version__ = "0.1.0"

from .assign import ConditionalConfig, hard_assign, prototypes, sinkhorn_conditionals, softmax_conditionals
from .clustering import ClusterConfig, ClusteringResult, InitStrategy, cluster, lloyd_kmeans, sinkhorn_kmeans
from .episodes import (
    AttributeSpec,
    ConsistencyMode,
    Episode,
    LabeledDataset,
    gen_attribute_dataset,
    load_dataset,
    sample_episode,
    save_dataset,
)
from .errors import NumericError, ParseError, ShapeError, SinkclustError
from .metrics import (
    EpisodeResult,
    EvalReport,
    aggregate,
    cscc,
    eval_few_shot_clustering,
    eval_supervised_fsc,
    eval_unsupervised_fsc,
    optimal_match,
)
from .ot_core import Marginals, TransportPlan, build_cost_matrix, sinkhorn, transport_objective

__all__ = [
    "AttributeSpec", "ClusterConfig", "ClusteringResult", "ConditionalConfig", "ConsistencyMode",
    "Episode", "EpisodeResult", "EvalReport", "InitStrategy", "LabeledDataset", "Marginals",
    "NumericError", "ParseError", "ShapeError", "SinkclustError", "TransportPlan",
    "aggregate", "build_cost_matrix", "cluster", "cscc", "eval_few_shot_clustering",
    "eval_supervised_fsc", "eval_unsupervised_fsc", "gen_attribute_dataset", "hard_assign",
    "lloyd_kmeans", "load_dataset", "optimal_match", "prototypes", "sample_episode",
    "save_dataset", "sinkhorn", "sinkhorn_conditionals", "sinkhorn_kmeans",
    "softmax_conditionals", "transport_objective",
]
