"""Benchmarking, ablation and interpretability tools for functional connectome prediction."""

from .connectome import (BrainGraph, ConnectomeWarning, TimeSeriesMatrix, build_graph, devectorize,
                         edge_budget, pearson_connectivity, threshold_top_k, vectorize_upper)
from .data_io import (CLASSIFICATION, REGRESSION, Dataset, SplitSpec, Subject, SyntheticConfig,
                      generate_synthetic, load_dataset, make_split, save_dataset)
from .metrics import auroc, evaluate, pearson_r, welch_test

__version__ = "0.1.0"

__all__ = [
    "BrainGraph", "ConnectomeWarning", "TimeSeriesMatrix", "build_graph", "devectorize", "edge_budget",
    "pearson_connectivity", "threshold_top_k", "vectorize_upper",
    "CLASSIFICATION", "REGRESSION", "Dataset", "SplitSpec", "Subject", "SyntheticConfig",
    "generate_synthetic", "load_dataset", "make_split", "save_dataset",
    "auroc", "evaluate", "pearson_r", "welch_test",
]
