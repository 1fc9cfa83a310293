"""Exception types raised across the package."""


class ProxylessKDError(Exception):
    """Base class for all package errors."""


class ShapeError(ProxylessKDError, ValueError):
    pass


class ArgumentError(ProxylessKDError, ValueError):
    pass


class ConfigurationError(ProxylessKDError):
    """A pluggable component is missing something it needs."""


class DegenerateEmbeddingError(ProxylessKDError, ArithmeticError):
    pass


class DegenerateClassifierError(ProxylessKDError, ArithmeticError):
    pass


class DivergenceError(ProxylessKDError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class InvariantViolation(ProxylessKDError, AssertionError):
    pass


class CorruptCheckpointError(ProxylessKDError):
    def __init__(self, section, detail):
        super().__init__(f"corrupt checkpoint [{section}]: {detail}")
        self.section = section


class UnsupportedVersionError(CorruptCheckpointError):
    def __init__(self, version):
        super().__init__("header", f"unsupported version {version}")
        self.version = version


class ParseError(ProxylessKDError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class MissingGalleryError(ProxylessKDError, ValueError):
    pass
