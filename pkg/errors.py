# errors.py
# Exception types shared by the library modules and the CLI


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its domain."""


class DegenerateModelError(RuntimeError):
    """Raised when model state makes an operation undefined (e.g. a zero weight norm)."""


class ConfigError(ValueError):
    """
    Raised by config validation.

    The message always starts with the offending field path, e.g.
    "trainer.epochs: must be >= 1", so the CLI can print it as-is.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
