"""Exception types raised across the package.

Every error carries a short machine-readable ``code`` so the command line
front-end can print ``ERROR <code>: <message>`` lines.
"""


class TopoReformerError(Exception):
    code = "Error"


class ShapeMismatch(TopoReformerError, ValueError):
    code = "ShapeMismatch"


class UnsupportedOp(TopoReformerError, ValueError):
    code = "UnsupportedOp"


class NonFinite(TopoReformerError, ValueError):
    code = "NonFinite"


class NotScalarLoss(TopoReformerError, ValueError):
    code = "NotScalarLoss"


class DanglingNode(TopoReformerError, ValueError):
    code = "DanglingNode"


class KinkUnavoidable(TopoReformerError, RuntimeError):
    code = "KinkUnavoidable"


class DimensionMismatch(TopoReformerError, ValueError):
    code = "DimensionMismatch"


class StalePairing(TopoReformerError, ValueError):
    code = "StalePairing"


class BatchTooSmall(TopoReformerError, ValueError):
    code = "BatchTooSmall"


class LengthMismatch(TopoReformerError, ValueError):
    code = "LengthMismatch"


class LabelOutOfRange(TopoReformerError, ValueError):
    code = "LabelOutOfRange"


class EmptyMatrix(TopoReformerError, ValueError):
    code = "EmptyMatrix"


class EmptyDataset(TopoReformerError, ValueError):
    code = "EmptyDataset"


class FrozenDependencyMissing(TopoReformerError, ValueError):
    code = "FrozenDependencyMissing"


class MissingModel(TopoReformerError, ValueError):
    code = "MissingModel"


class StageMissing(TopoReformerError, KeyError):
    code = "StageMissing"


class ConfigInvalid(TopoReformerError, ValueError):
    code = "ConfigInvalid"


class MissingArtifact(TopoReformerError, FileNotFoundError):
    code = "MissingArtifact"


class WeightFormatError(TopoReformerError, ValueError):
    code = "WeightFormatError"


class GradcheckFailed(TopoReformerError, RuntimeError):
    code = "GradcheckFailed"


# IDX parsing
class IdxError(TopoReformerError, ValueError):
    code = "IdxError"


class BadMagic(IdxError):
    code = "BadMagic"


class TruncatedFile(IdxError):
    code = "TruncatedFile"


class DimMismatch(IdxError):
    """Also raised by :func:`bottleneck0` for diagrams of different dimension."""

    code = "DimMismatch"
