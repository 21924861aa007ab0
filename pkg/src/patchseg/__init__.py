"""Pseudo-annotated segmentation mask distillation from patch features.

The pipeline takes dense per-patch feature files, builds a patch affinity
graph per image, partitions it by modularity maximization, splits the
partitions into spatially connected segments, pseudo-labels the valid
segments by clustering segment-crop features, synthesizes per-pixel masks,
and evaluates them against ground truth with Hungarian-matched metrics.
"""

__version__ = "0.1.0"

from .affinity import PatchGraph, build_affinity, threshold_adjacency
from .denoise import drop_dominant, export_training_set, masked_cross_entropy
from .errors import ConfigError, DataError, PatchsegError
from .evalkit import (
    ConfusionMatrix,
    EvalReport,
    accumulate_confusion,
    evaluate_dataset,
    hungarian_max,
    score,
)
from .graphseg import Segment, SegmentSet, louvain, modularity, split_components
from .maskgen import (
    UNLABELED,
    read_mask_png,
    resize_mask,
    synthesize_mask,
    write_mask_png,
)
from .pseudolabel import (
    ClusterModel,
    CropRecord,
    assign_segment_labels,
    kmeans,
    make_crop_specs,
    retrieve_neighbors,
)
from .tensorio import (
    DatasetManifest,
    ManifestImage,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)

__all__ = [
    "ClusterModel",
    "ConfigError",
    "ConfusionMatrix",
    "CropRecord",
    "DataError",
    "DatasetManifest",
    "EvalReport",
    "ManifestImage",
    "PatchGraph",
    "PatchsegError",
    "Segment",
    "SegmentSet",
    "UNLABELED",
    "accumulate_confusion",
    "assign_segment_labels",
    "build_affinity",
    "drop_dominant",
    "evaluate_dataset",
    "export_training_set",
    "hungarian_max",
    "kmeans",
    "load_manifest",
    "louvain",
    "make_crop_specs",
    "masked_cross_entropy",
    "modularity",
    "read_mask_png",
    "read_tensor",
    "resize_mask",
    "retrieve_neighbors",
    "save_manifest",
    "score",
    "split_components",
    "synthesize_mask",
    "threshold_adjacency",
    "write_mask_png",
    "write_tensor",
    "__version__",
]
