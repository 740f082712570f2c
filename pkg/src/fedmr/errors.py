"""Exception hierarchy. Every error raised by the package derives from FedMRError."""


class FedMRError(Exception):
    pass


class InvalidArchitectureError(FedMRError, ValueError):
    pass


class ShapeMismatchError(FedMRError, ValueError):
    pass


class EmptyAggregateError(FedMRError, ValueError):
    pass


class DegenerateNormError(FedMRError, ValueError):
    pass


class EmptyPopulationError(FedMRError, ValueError):
    pass


class PlanShapeError(FedMRError, ValueError):
    pass


class InvalidGranularityError(FedMRError, ValueError):
    pass


class NumericInputError(FedMRError, ValueError):
    pass


class EmptyShardError(FedMRError, ValueError):
    pass


class MissingReferenceError(FedMRError, ValueError):
    pass


class EmptyEvaluationError(FedMRError, ValueError):
    pass


class InfeasibleCentersError(FedMRError, ValueError):
    pass


class InfeasiblePartitionError(FedMRError, ValueError):
    pass


class InvalidKError(FedMRError, ValueError):
    pass


class InvalidBoundsError(FedMRError, ValueError):
    pass


class RoutingError(FedMRError, RuntimeError):
    pass


class InvariantViolation(FedMRError, RuntimeError):
    """A conservation property that must hold exactly (up to rounding) was broken."""


class ManifestError(FedMRError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class IncompatibleRunsError(FedMRError, ValueError):
    pass


class RunAborted(FedMRError, RuntimeError):
    """A client update failed; the original error is chained as ``__cause__``."""

    def __init__(self, round_: int, client_id: int, cause: Exception):
        super().__init__(f"round {round_}, client {client_id}: {cause}")
        self.round = round_
        self.client_id = client_id
