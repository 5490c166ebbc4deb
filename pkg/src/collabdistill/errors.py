"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class CollabDistillError(Exception):
    """Base class for errors raised by this package."""


class SpecificationError(CollabDistillError, ValueError):
    """An architecture description is malformed."""


class PreconditionError(CollabDistillError, ValueError):
    """An operation was called on inputs that violate its contract."""


class DegenerateFeatureError(PreconditionError):
    """A feature map carries too little variation to be whitened."""


class InfeasibleError(PreconditionError):
    """No admissible answer exists for the requested budget."""


class ConfigurationError(CollabDistillError, ValueError):
    """Networks, embeddings or config files do not fit together."""


class DataError(CollabDistillError):
    """A corpus is empty or unreadable."""


class DivergenceError(CollabDistillError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last state whose loss was finite.
    """

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step
