"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violated an operation's documented precondition."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is out of range or unknown."""


class ParseError(ValueError):
    """A data or config file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class NonFiniteLossError(NumericError):
    """Training produced a non-finite loss; carries the offending step's numbers."""

    def __init__(self, snapshot):
        super().__init__(f"non-finite loss: {snapshot}")
        self.snapshot = snapshot


class VocabMismatchError(ContractError):
    """A checkpoint and the data or vocabulary handed to it disagree."""
