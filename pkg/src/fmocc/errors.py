"""Exception hierarchy shared by every fmocc module."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class SceneFormatError(ValueError):
    """Base class for scene-file parse failures."""


class MagicError(SceneFormatError):
    pass


class VersionError(SceneFormatError):
    pass


class HeaderError(SceneFormatError):
    pass


class TruncationError(SceneFormatError):
    def __init__(self, expected: int, actual: int, what: str = "payload"):
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass
