"""Exception hierarchy.

The CLI maps the three families onto exit codes: configuration problems
exit 2, missing inputs exit 3 and numerical failures exit 4.
"""


class SahmrError(Exception):
    exit_code = 1


class ConfigError(SahmrError, ValueError):
    exit_code = 2


class MissingInputError(SahmrError, FileNotFoundError):
    exit_code = 3


class NumericalError(SahmrError, ArithmeticError):
    exit_code = 4


# geometry
class PointBehindCamera(NumericalError):
    pass


class InvalidDepth(NumericalError):
    pass


# scene / body
class EmptyScene(ConfigError):
    pass


class DimensionMismatch(ConfigError):
    pass


class EmptyRegion(ConfigError):
    pass


# stage 1
class EmptyHeatmap(NumericalError):
    pass


class EmptyGrid(ConfigError):
    pass


class UnnormalizedConfidence(NumericalError):
    pass


class RootOutsideFrustum(NumericalError):
    pass


class UnknownScenario(ConfigError):
    pass


# autodiff / training
class NonFiniteError(NumericalError):
    pass


class NonScalarLoss(ConfigError):
    pass


class NonFiniteLoss(NumericalError):
    pass


# optimization
class Diverged(NumericalError):
    pass


class MissingCheckpoint(MissingInputError):
    pass


ShapeMismatch = DimensionMismatch


class NoContactPoints(SahmrError):
    """Raised only on request; the mesh network otherwise runs trunk-only."""


class MaxIterations(NumericalError):
    pass
