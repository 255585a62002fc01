"""Road segmentation with superpixel hypercolumns and random forests of local linear experts."""

__version__ = "0.1.0"

from .features import FeatureStack, KernelBank, extract_hypercolumns, load_kernel_bank
from .forest import ForestConfig, ForestModel, estimate_memory, load_model, save_model, train_forest
from .metrics import MetricsReport, evaluate
from .pipeline import DEFAULT_SCALES, DatasetIndex, PipelineModel, predict_image, train_pipeline
from .raster import ConfidenceMap, Image, LabelMask, load_image, load_mask
from .superpixels import SuperpixelMap, pool_features, slic
from .svm import LinearExpert, SvmConfig, train_svm

__all__ = [
    "__version__",
    "ConfidenceMap",
    "DEFAULT_SCALES",
    "DatasetIndex",
    "FeatureStack",
    "ForestConfig",
    "ForestModel",
    "Image",
    "KernelBank",
    "LabelMask",
    "LinearExpert",
    "MetricsReport",
    "PipelineModel",
    "SuperpixelMap",
    "SvmConfig",
    "estimate_memory",
    "evaluate",
    "extract_hypercolumns",
    "load_image",
    "load_kernel_bank",
    "load_mask",
    "load_model",
    "pool_features",
    "predict_image",
    "save_model",
    "slic",
    "train_forest",
    "train_pipeline",
    "train_svm",
]
