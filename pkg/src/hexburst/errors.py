"""Exception hierarchy. Each class carries a short machine-readable category
that the CLI prints on failure."""


class HexburstError(Exception):
    category = "runtime"


class ShapeError(HexburstError, ValueError):
    category = "shape"


class ConfigError(HexburstError, ValueError):
    category = "config"


class NumericalError(HexburstError, ArithmeticError):
    category = "numerical"


class FormatError(HexburstError, ValueError):
    category = "format"


class StageError(HexburstError):
    """Wraps a failure raised inside a named pipeline stage."""

    category = "stage"

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")
