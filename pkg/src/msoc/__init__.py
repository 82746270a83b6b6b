"""Audio-visual deepfake detection with per-modality one-class learning."""

from .data import BenchmarkManifest, Category, SampleRecord, Split
from .model import MSOCModel, fuse, fuse_avoc
from .oc import OCSoftmax, OCSoftmaxParams, oc_softmax_loss

__all__ = ["BenchmarkManifest", "Category", "MSOCModel", "OCSoftmax", "OCSoftmaxParams", "SampleRecord",
           "Split", "fuse", "fuse_avoc", "oc_softmax_loss"]
__version__ = "0.1.0"
