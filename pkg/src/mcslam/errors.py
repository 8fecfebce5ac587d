"""Exception hierarchy shared by all modules."""


class McSlamError(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(McSlamError, ValueError):
    pass


class InvalidDepthError(InvalidInputError):
    pass


class TriangulationError(McSlamError):
    pass


class InitFailure(McSlamError):
    pass


class NotReadyError(McSlamError):
    """Monocular initialization lacks parallax (e.g. pure rotation)."""


class InsufficientPointsError(InvalidInputError):
    pass


class DegeneratePoseError(McSlamError):
    pass


class NoConvergenceError(McSlamError):
    pass


class SingularInformationError(McSlamError):
    pass


class UndefinedEntropyError(McSlamError):
    pass


class PolicyNotReadyError(McSlamError):
    pass


class ConfigError(McSlamError, ValueError):
    pass
