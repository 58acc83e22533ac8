"""Exception hierarchy.

Every error carries a short machine-readable ``code`` that the CLI prints
verbatim, so scripts can branch on it without parsing messages.
"""


class GPShapeError(Exception):
    code = "E_INTERNAL"


class ConfigError(GPShapeError, ValueError):
    code = "E_CONFIG"


class ParseError(GPShapeError, ValueError):
    code = "E_PARSE"


class GeometryError(GPShapeError, ValueError):
    code = "E_GEOMETRY"


class NumericalError(GPShapeError, ArithmeticError):
    code = "E_NUMERIC"


class DataError(GPShapeError, ValueError):
    code = "E_DATA"


# geometry
class DegeneratePoint(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


class InvalidTransform(GeometryError):
    pass


# dataprep
class EmptyCloud(DataError):
    pass


class DegenerateExtent(DataError):
    pass


class NoHits(DataError):
    pass


class InsufficientPoints(DataError):
    pass


# clustering
class InvalidK(ConfigError):
    pass


class DuplicateCenters(ConfigError):
    pass


# gp
class NotPositiveDefinite(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


# template
class ClusterTooSmall(DataError):
    pass


class SchemaVersionMismatch(ParseError):
    pass


class CorruptTemplate(ParseError):
    pass


# confidence
class NoUsablePoints(DataError):
    pass


class InvalidDelta(ConfigError):
    pass


# synthbench
class DegenerateConfiguration(GeometryError):
    pass


# metrics
class LengthMismatch(DataError):
    pass


class DegenerateVariance(DataError):
    pass
