"""Reconstruction-based outlier detection for volumetric scan data.

Encoder-decoder generators are trained on healthy volumes to reconstruct
the next slice stack from the current one; scans whose reconstruction
distance exceeds a training-derived threshold are flagged as outliers.
"""

__version__ = "0.1.0"

from .data_pipeline import (  # noqa: F401
    DatasetSplit,
    Label,
    Plane,
    SliceSequence,
    SliceStack,
    SplitConfig,
    Volume,
    WindowPair,
    build_windows,
    extract_plane,
    load_volume,
    make_split,
)
from .models import ModelKind, ModelSpec, TrainedModel, make_spec  # noqa: F401
from .scoring import DistanceMetric, ScanLabel, ScoreTable, Threshold, ThresholdKind  # noqa: F401
from .training import TrainConfig, TrainHistory  # noqa: F401
