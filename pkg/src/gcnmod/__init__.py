"""Moving object detection by semi-supervised node classification.

Pipeline: frame/instance ingestion, temporal-median background, per-instance
flow/texture/intensity descriptors, k-NN graph construction, and a two-layer
graph convolutional network evaluated on unseen videos with pixel-level
F-measure.
"""

from .background import BackgroundModel, extract_roi, median_background
from .features import FeatureLayout, FeatureMatrix, NodeFeatures, node_features
from .gcn import GcnModel, TrainConfig, TrainHistory, predict, train
from .graph import NormalizedAdjacency, SparseGraph, build_graph, normalize
from .media import Frame, GroundTruthMask, Instance, SyntheticSpec, synth_sequence
from .protocol import EvalReport, Experiment, LabelMatrix, SplitSpec, f_measure, monte_carlo

__version__ = "0.1.0"

__all__ = [
    "BackgroundModel", "EvalReport", "Experiment", "FeatureLayout",
    "FeatureMatrix", "Frame", "GcnModel", "GroundTruthMask", "Instance",
    "LabelMatrix", "NodeFeatures", "NormalizedAdjacency", "SparseGraph",
    "SplitSpec", "SyntheticSpec", "TrainConfig", "TrainHistory",
    "build_graph", "extract_roi", "f_measure", "median_background",
    "monte_carlo", "node_features", "normalize", "predict",
    "synth_sequence", "train",
]
