"""Bag of Deep Visual Words (BoDVW) features for chest X-ray classification.

The pipeline taps a pooling layer of a pre-trained VGG16, L2-normalizes every
depth vector, quantizes the vectors against a k-means codebook and feeds the
L2-normalized word histogram to an RBF SVM.  The DCF-BoVW baseline (L1 on both
normalization steps) is available through the same entry points.
"""

__version__ = "0.1.0"

from .imageio import (
    DatasetManifest,
    ModelInput,
    RawImage,
    load_image,
    load_manifest,
    preprocess,
    save_manifest,
)
from .cnn_adapter import (
    FeatureExtractor,
    FeatureMap,
    layer_shape,
    read_feature_map,
    write_feature_map,
)
from .deepfeatures import (
    EPS,
    DeepFeatureSet,
    l1_normalize_each,
    l2_normalize_each,
    normalize_rows,
    reroll,
    unroll,
)
from .codebook import (
    Codebook,
    KMeansConfig,
    assign,
    load_codebook,
    save_codebook,
    train_codebook,
)
from .encoder import (
    VARIANTS,
    BoVWVector,
    encode_counts,
    encode_image,
    finalize_l1,
    finalize_l2,
)
from .svm import (
    GridSearchSpec,
    Standardizer,
    SvmModel,
    grid_search_C,
    predict,
    rbf_kernel,
    train_binary,
    train_multiclass,
)
from .evalharness import (
    EvalReport,
    ExperimentConfig,
    ablate_clusters,
    ablate_layers,
    export_report,
    metrics,
    run_experiment,
    stratified_split,
)

__all__ = [
    "__version__",
    "DatasetManifest",
    "ModelInput",
    "RawImage",
    "load_image",
    "load_manifest",
    "preprocess",
    "save_manifest",
    "FeatureExtractor",
    "FeatureMap",
    "layer_shape",
    "read_feature_map",
    "write_feature_map",
    "EPS",
    "DeepFeatureSet",
    "l1_normalize_each",
    "l2_normalize_each",
    "normalize_rows",
    "reroll",
    "unroll",
    "Codebook",
    "KMeansConfig",
    "assign",
    "load_codebook",
    "save_codebook",
    "train_codebook",
    "VARIANTS",
    "BoVWVector",
    "encode_counts",
    "encode_image",
    "finalize_l1",
    "finalize_l2",
    "GridSearchSpec",
    "Standardizer",
    "SvmModel",
    "grid_search_C",
    "predict",
    "rbf_kernel",
    "train_binary",
    "train_multiclass",
    "EvalReport",
    "ExperimentConfig",
    "ablate_clusters",
    "ablate_layers",
    "export_report",
    "metrics",
    "run_experiment",
    "stratified_split",
]
