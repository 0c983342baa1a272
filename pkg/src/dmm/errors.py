"""Exception hierarchy shared by all modules.

The CLI maps :class:`ValidationError` subclasses to exit code 1 and
:class:`NumericalError` subclasses to exit code 2.
"""


class DmmError(Exception):
    pass


class ValidationError(DmmError, ValueError):
    """Bad arguments, shapes or configuration."""


class ShapeError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NumericalError(DmmError, FloatingPointError):
    pass


class MaskError(NumericalError):
    pass


class GenerationError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass
