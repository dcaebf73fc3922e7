"""compnet: point-cloud deep learning with composite layers.

Self-contained numpy implementation of composite point-convolutional and
aggregate layers, a weight-tensor point convolution baseline, networks for
classification and anomaly detection (rotation self-supervision and a
Deep SVDD variant), shallow GOOD + Isolation Forest baselines, and the
evaluation toolchain.
"""

from .anomaly import (
    DetectorConfig,
    ScoredDataset,
    TransformationSet,
    build_surrogate_dataset,
    detect,
    dsvdd_score,
    normality_score,
    rotate,
)
from .baselines import GoodDescriptor, IsolationForest, good_descriptor, ifor_fit, ifor_score
from .datasets import LabeledDataset, generate_shape, load_directory, make_synthetic_dataset, split
from .geometry import PointCloud, WindowSet, knn_windows, load_xyz, normalize, sample_output_points, save_xyz
from .metrics import (
    MethodResults,
    average_accuracy,
    average_rank,
    detection_table,
    overall_accuracy,
    roc_auc,
    wilcoxon_one_sided,
)
from .network import (
    Network,
    NetworkSpec,
    build_classification_net,
    build_dsvdd_net,
    classification_spec,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .training import Adam, TrainConfig, cross_entropy_loss, dsvdd_loss, train

__all__ = [
    "Adam",
    "DetectorConfig",
    "GoodDescriptor",
    "IsolationForest",
    "LabeledDataset",
    "MethodResults",
    "Network",
    "NetworkSpec",
    "PointCloud",
    "ScoredDataset",
    "TrainConfig",
    "TransformationSet",
    "WindowSet",
    "average_accuracy",
    "average_rank",
    "build_classification_net",
    "build_dsvdd_net",
    "build_surrogate_dataset",
    "classification_spec",
    "count_parameters",
    "cross_entropy_loss",
    "detect",
    "detection_table",
    "dsvdd_loss",
    "dsvdd_score",
    "generate_shape",
    "good_descriptor",
    "ifor_fit",
    "ifor_score",
    "knn_windows",
    "load_checkpoint",
    "load_directory",
    "load_xyz",
    "make_synthetic_dataset",
    "normality_score",
    "normalize",
    "overall_accuracy",
    "roc_auc",
    "rotate",
    "sample_output_points",
    "save_checkpoint",
    "save_xyz",
    "split",
    "train",
    "wilcoxon_one_sided",
]
