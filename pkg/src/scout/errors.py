"""Exception hierarchy.

Every error belongs to one family; the CLI maps families to exit codes.
"""


class ScoutError(Exception):
    exit_code = 1


class ConfigError(ScoutError):
    exit_code = 2


class DataError(ScoutError):
    exit_code = 3


class MissingColumn(DataError):
    pass


class NonMonotoneFrames(DataError):
    pass


class UnknownAgentType(DataError):
    pass


class NonDivisibleRates(DataError):
    pass


class EmptyWindow(DataError):
    pass


class EmptyDataset(DataError):
    pass


class SchemaMismatch(DataError):
    exit_code = 10


class GraphError(ScoutError):
    exit_code = 4


class CoincidentAgents(GraphError):
    pass


class IsolatedNodeDegreeZero(GraphError):
    pass


class NumericsError(ScoutError):
    exit_code = 5


class ShapeMismatch(NumericsError):
    pass


class AllMaskedRow(NumericsError):
    pass


class LossError(ScoutError):
    exit_code = 6


class NoEligibleNodes(LossError):
    pass


class MissingClass(LossError):
    pass


class TrainingError(ScoutError):
    exit_code = 7


class NonFiniteGradient(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    pass


class AttributionError(ScoutError):
    exit_code = 8


class NonDifferentiableTarget(AttributionError):
    pass


class WrongVariant(AttributionError):
    pass


class IoFailure(ScoutError):
    exit_code = 9
