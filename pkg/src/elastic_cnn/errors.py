"""Exception hierarchy shared by every module in the package."""


class ElasticError(Exception):
    """Base class for all package errors."""


class ConfigError(ElasticError, ValueError):
    """A layer, block or architecture description is inconsistent."""


class DegenerateInputError(ElasticError, ValueError):
    """An operator received an input it cannot reduce over (empty or too small)."""


class InputError(ElasticError, ValueError):
    """A value supplied at call time is out of range or malformed."""


class UsageError(ElasticError, RuntimeError):
    """An API was called in a state that does not support it."""


class FormatError(ElasticError, ValueError):
    """A file on disk does not match the expected binary or text layout."""


class TrainingDiverged(ElasticError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, step: int, lr: float, loss: float):
        self.epoch, self.step, self.lr, self.loss = epoch, step, lr, loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}, lr {lr:g}")
