"""Exception types shared across the lab."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class SpecError(ValueError):
    """A structural description (adapter, task, config) is malformed."""


class ContractError(RuntimeError):
    """A call violated an operation's precondition."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class InputError(ValueError):
    """Model input does not match the configured geometry."""


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class FingerprintMismatch(RuntimeError):
    """Checkpoint was produced under a different model configuration."""
