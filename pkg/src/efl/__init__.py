"""Acoustic facial-expression sensing: FMCW signal processing, a synthetic echo
simulator, augmentation and contrastive domain adaptation."""

from .errors import (
    ConfigError,
    DegenerateInputError,
    EflError,
    InsufficientDataError,
    NumericError,
    ShapeError,
    StageError,
    UndefinedAnchorError,
)
from .sigproc import AcousticBuffer, ChirpSpec, FmcwConstants, Spectrogram, preprocess
from .echosim import DomainProfile, ExpressionClass, generate_dataset, simulate_recording
from .estimators import (
    AcousticAugmenter,
    ContrastiveDomainAdapter,
    HiddenLayerClassifier,
    LloydKMeans,
    SpectrogramFeaturizer,
)

__version__ = "0.1.0"

__all__ = [
    "AcousticAugmenter", "AcousticBuffer", "ChirpSpec", "ConfigError", "ContrastiveDomainAdapter",
    "DegenerateInputError", "DomainProfile", "EflError", "ExpressionClass", "FmcwConstants",
    "HiddenLayerClassifier", "InsufficientDataError", "LloydKMeans", "NumericError", "ShapeError",
    "Spectrogram", "SpectrogramFeaturizer", "StageError", "UndefinedAnchorError",
    "generate_dataset", "preprocess", "simulate_recording",
]
