"""Exception taxonomy.

Every error raised by this package derives from TerraclothError and carries a
``category`` used by the service layer and the CLI to map failures onto HTTP
error bodies and process exit codes (config=2, io=3, algorithm=4).
"""


class TerraclothError(Exception):
    category = "algorithm"


class ConfigError(TerraclothError):
    category = "config"


class CloudIoError(TerraclothError):
    category = "io"


class AlgorithmError(TerraclothError):
    category = "algorithm"


# --- configuration ---------------------------------------------------------

class UnknownKey(ConfigError):
    pass


class TypeMismatch(ConfigError):
    pass


class OutOfRange(ConfigError):
    pass


class InvalidSpec(ConfigError):
    pass


# --- file I/O ---------------------------------------------------------------

class IoFailure(CloudIoError):
    pass


class MalformedHeader(CloudIoError):
    pass


class TruncatedBody(CloudIoError):
    pass


class UnsupportedProperty(CloudIoError):
    pass


class NonFiniteCoordinate(CloudIoError):
    pass


class NonUnitQuaternion(CloudIoError):
    pass


# --- algorithms -------------------------------------------------------------

class EmptyCloud(AlgorithmError):
    pass


class InsufficientNeighbors(AlgorithmError):
    pass


class LengthMismatch(AlgorithmError):
    pass


class DegenerateExtent(AlgorithmError):
    pass


class PointOutsideCloth(AlgorithmError):
    pass


class InvalidCellSize(AlgorithmError):
    pass


class AllNoData(AlgorithmError):
    pass


class EmptyCorridor(AlgorithmError):
    pass


class UnlabeledPointsRemain(AlgorithmError):
    pass
