"""Exception types shared across the pipeline.

Every error carries a stable machine-readable ``code`` (used in the CLI's
error JSON) and an ``exit_code`` (0 success, 2 config, 3 data, 4 numeric).
"""


class ReconscanError(Exception):
    code = "ERROR"
    exit_code = 3


class ConfigError(ReconscanError):
    code = "CONFIG_ERROR"
    exit_code = 2


class FormatError(ReconscanError):
    code = "FORMAT_ERROR"


class DimensionError(ReconscanError):
    code = "DIMENSION_ERROR"


class NonFiniteError(ReconscanError):
    code = "NONFINITE_ERROR"


class RangeError(ReconscanError):
    code = "RANGE_ERROR"


class TooShortError(ReconscanError):
    code = "TOO_SHORT"


class LeakageError(ReconscanError):
    code = "LEAKAGE_ERROR"


class SpecError(ReconscanError):
    code = "SPEC_ERROR"


class RegionError(ReconscanError):
    code = "REGION_ERROR"


class GeometryError(ReconscanError):
    code = "GEOMETRY_ERROR"


class ChannelError(ReconscanError):
    code = "CHANNEL_ERROR"


class PlacementError(ReconscanError):
    code = "PLACEMENT_ERROR"


class ShapeError(ReconscanError):
    code = "SHAPE_ERROR"


class ZeroNormError(ReconscanError):
    code = "ZERO_NORM_ERROR"


class EmptyDataError(ReconscanError):
    code = "EMPTY_DATA_ERROR"


class DivergenceError(ReconscanError):
    code = "DIVERGENCE_ERROR"
    exit_code = 4


class SingleClassError(ReconscanError):
    code = "SINGLE_CLASS_ERROR"


class MissingPlaneError(ReconscanError):
    code = "MISSING_PLANE_ERROR"


class LayerError(ReconscanError):
    code = "LAYER_ERROR"


class CheckpointError(ReconscanError):
    code = "CHECKPOINT_ERROR"
