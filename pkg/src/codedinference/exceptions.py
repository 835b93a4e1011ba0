"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: configuration/usage and
data-format problems exit 2, artifact compatibility problems exit 3, anything
else is a runtime failure (exit 1).
"""


class ConfigurationError(ValueError):
    """Invalid geometry, hyperparameter, or usage."""


class ContractError(ValueError):
    """A call violated an operation's input contract (shape, range, arity)."""


class DataFormatError(ConfigurationError):
    """A dataset file failed to parse; the message names the offending offset."""


class CompatibilityError(RuntimeError):
    """Artifacts that must match do not (parameter digest, geometry)."""


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss; carries the offending step."""

    def __init__(self, message, *, epoch=None, step=None, pattern=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.pattern = pattern
