"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is the 1-based source line when known."""

    kind = "config"

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        prefix = f"line {line}: " if line else ""
        super().__init__(prefix + message)


class ConfigSyntaxError(ConfigError):
    kind = "syntax"


class UnknownKeyError(ConfigError):
    kind = "unknown-key"


class TypeMismatchError(ConfigError):
    kind = "type"


class ConstraintError(ConfigError):
    kind = "constraint"


class FormatError(IOError):
    """Malformed or truncated file; ``offset`` is the byte (or line) position."""

    def __init__(self, path, message, offset=None, unit="byte"):
        self.path = str(path)
        self.offset = offset
        where = f" at {unit} {offset}" if offset is not None else ""
        super().__init__(f"{self.path}: {message}{where}")


class TruncatedFileError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class PropertyMismatchError(FormatError):
    pass
