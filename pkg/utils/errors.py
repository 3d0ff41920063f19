"""Exception hierarchy shared by the services and the command line.

Every error carries the exit code the command line reports for it.
"""

from typing import Optional


class AssimilationError(Exception):
    """Base class for all errors raised by the toolkit"""

    exit_code = 1


class DomainError(AssimilationError, ValueError):
    """An argument lies outside the domain of an operation"""

    exit_code = 5


class ConfigError(AssimilationError, ValueError):
    """Invalid configuration key or value"""

    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class MissingInputError(AssimilationError, FileNotFoundError):
    """A required input file does not exist"""

    exit_code = 3


class ShapeMismatchError(AssimilationError, ValueError):
    """Array dimensions, checkpoints and datasets do not agree"""

    exit_code = 4


class InvalidDataError(AssimilationError, ValueError):
    """An input table is empty or ill-formed"""

    exit_code = 5


class NonFiniteStateError(AssimilationError, FloatingPointError):
    """A state became NaN or infinite during integration or filtering"""

    exit_code = 5

    def __init__(self, message: str, step: Optional[int] = None,
                 t: Optional[float] = None, particle: Optional[int] = None):
        super().__init__(message)
        self.step = step
        self.t = t
        self.particle = particle


class DegenerateWeightsError(AssimilationError, ValueError):
    """Weights sum to zero or are not finite"""

    exit_code = 5


class InflationAdaptationError(AssimilationError, RuntimeError):
    """Inflation search hit its iteration cap without reaching the ESS band"""

    exit_code = 5


class TrainingDivergedError(AssimilationError, FloatingPointError):
    """Training produced a non-finite loss"""

    exit_code = 5

    def __init__(self, message: str, epoch: int, batch: int,
                 last_finite_loss: Optional[float]):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.last_finite_loss = last_finite_loss


class SingularCovarianceError(AssimilationError, ValueError):
    """A covariance matrix is not symmetric positive definite"""

    exit_code = 5
