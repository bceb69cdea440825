"""Dual-mixing collaborative filtering on bipartite interaction graphs."""

from .config import TrainConfig, resolve_config
from .dataset import InteractionDataset, NormalizedGraph, build_graph, load_dataset, random_split, sample_batch
from .encoder import LayerStack, propagate, readout
from .evaluation import RankingResult, evaluate, run_ablations, sparsity_report
from .mixing import MixBatch, MixParams, build_mix_batch
from .objective import LossConfig, LossReport, total_loss
from .trainer import TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "InteractionDataset", "LayerStack", "LossConfig", "LossReport", "MixBatch", "MixParams", "NormalizedGraph",
    "RankingResult", "TrainConfig", "TrainResult", "build_graph", "build_mix_batch", "evaluate", "load_dataset",
    "propagate", "random_split", "readout", "resolve_config", "run_ablations", "sample_batch", "sparsity_report",
    "total_loss", "train",
]
