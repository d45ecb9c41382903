"""Exception types shared across the package.

The CLI maps these onto exit codes: numerical failures exit with 2,
everything else with 1.
"""


class BikcError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BikcError):
    """Invalid configuration, missing statistics or mismatched shapes."""


class ContractError(BikcError):
    """A caller violated an operation's precondition."""


class ParseError(BikcError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class NumericalError(BikcError):
    """Non-finite values appeared during a computation."""

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class TrainingDiverged(NumericalError):
    """Loss became non-finite; ``last_good`` holds the model from the previous step."""

    def __init__(self, message, last_good=None, iteration=None):
        super().__init__(message)
        self.last_good = last_good
        self.iteration = iteration


class GenerationError(BikcError):
    """A scripted demonstration failed to complete its task."""
