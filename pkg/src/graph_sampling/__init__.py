"""Graph-sampling mini-batches for deep metric learning, with baselines and evaluation."""
from .data import (DatasetIndex, LabeledFeatureSet, SyntheticConfig, build_index,
                   generate_synthetic, generate_train_test, load_featureset, save_featureset)
from .errors import (ConfigError, GraphSamplingError, ParseError, TrainingAborted,
                     ValidationError)
from .evaluation import EvalReport, EvalSplit, evaluate, evaluate_embeddings, macc, make_split
from .loss import LossConfig, LossOutput, batch_hard_triplet, brute_force_triplet_oracle
from .metric import RerankConfig, mask_diagonal, pairwise_distance, rerank
from .model import EmbeddingModel
from .samplers import (BatchPlan, ClassNeighborGraph, SamplerConfig, build_class_graph,
                       cluster_classes, cluster_epoch_plan, gs_epoch_plan, pk_epoch_plan,
                       select_exemplars)
from .trainer import (MetricsLog, TrainConfig, clip_gradient, loss_and_grad, sgd_step, train)

__version__ = "0.1.0"

__all__ = [
    "BatchPlan", "ClassNeighborGraph", "ConfigError", "DatasetIndex", "EmbeddingModel",
    "EvalReport", "EvalSplit", "GraphSamplingError", "LabeledFeatureSet", "LossConfig",
    "LossOutput", "MetricsLog", "ParseError", "RerankConfig", "SamplerConfig",
    "SyntheticConfig", "TrainConfig", "TrainingAborted", "ValidationError",
    "batch_hard_triplet", "brute_force_triplet_oracle", "build_class_graph", "build_index",
    "clip_gradient", "cluster_classes", "cluster_epoch_plan", "evaluate",
    "evaluate_embeddings", "generate_synthetic", "generate_train_test", "gs_epoch_plan",
    "load_featureset", "loss_and_grad", "macc", "make_split", "mask_diagonal",
    "pairwise_distance", "pk_epoch_plan", "rerank", "save_featureset", "select_exemplars",
    "sgd_step", "train",
]
