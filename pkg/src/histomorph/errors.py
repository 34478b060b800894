"""Exception hierarchy shared by every stage."""


class HistomorphError(Exception):
    """Base class for all package errors."""


class InputError(HistomorphError, ValueError):
    """Arguments violate an operation's preconditions."""


class DegenerateInputError(InputError):
    """Input is well-formed but carries too little information to fit."""


class UndefinedMetricError(InputError):
    """A metric is undefined for the given labels (e.g. one class only)."""


class CapacityError(HistomorphError):
    """A synthetic layout could not be realized under its constraints."""


class MissingArtifactError(HistomorphError, FileNotFoundError):
    """An upstream artifact required by a pipeline stage is absent."""
