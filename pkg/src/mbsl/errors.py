"""Exception hierarchy shared by all mbsl modules."""


class MBSLError(Exception):
    """Base class for every error raised by mbsl."""


class ParameterError(MBSLError, ValueError):
    pass


class DimensionError(MBSLError, ValueError):
    pass


class DegenerateInputError(MBSLError, ValueError):
    pass


class ContractError(MBSLError):
    """A caller broke an interface precondition (wrong tape use, bad matrix, ...)."""


class FormatError(MBSLError):
    """On-disk artifact is missing, truncated or inconsistent with its manifest."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class TrainingError(MBSLError):
    """Optimization diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
