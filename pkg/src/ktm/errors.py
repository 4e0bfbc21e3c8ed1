"""Exception types shared across the package."""


class KTMError(Exception):
    """Base class for all package errors."""


class ContractError(KTMError, ValueError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Operand shapes do not conform."""


class NumericDomainError(KTMError, ArithmeticError):
    """Non-finite values reached an operation that cannot accept them."""


class CapacityError(ContractError):
    """Sequence exceeds the model's positional capacity."""


class VocabularyError(ContractError):
    """Token id outside the vocabulary."""


class StaleCacheError(KTMError):
    """K-gram cache entries were produced by different encoder weights."""


class DivergedError(KTMError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


class StalledCurriculumError(KTMError):
    """A curriculum stage exhausted its epoch budget below threshold."""

    def __init__(self, stage: int, epochs: int, best_accuracy: float, threshold: float, log=None):
        super().__init__(
            f"stage {stage} stalled: best val accuracy {best_accuracy:.4f} < "
            f"threshold {threshold} after {epochs} epochs"
        )
        self.stage = stage
        self.epochs = epochs
        self.best_accuracy = best_accuracy
        self.threshold = threshold
        self.log = log


class ConfigError(KTMError, ValueError):
    """Invalid run configuration."""


class CheckpointError(KTMError):
    """Checkpoint file is malformed or fails its integrity check."""
