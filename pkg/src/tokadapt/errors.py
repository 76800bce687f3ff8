"""Exception types shared across the package."""


class TokadaptError(Exception):
    """Base class for all package-specific errors."""


class WavFormatError(TokadaptError):
    """Malformed or unsupported WAV container."""


class StageError(TokadaptError):
    """Feature pipeline operation applied at the wrong stage."""


class TooShortError(TokadaptError):
    """Utterance shorter than one analysis window."""


class ShapeError(TokadaptError):
    """Dimension mismatch between model and data."""


class NoPathError(TokadaptError):
    """No legal state path exists (left-to-right topology needs T >= m)."""


class InitError(TokadaptError):
    """Model initialization impossible with the given data."""


class ConfigError(TokadaptError):
    """Invalid or inconsistent configuration."""


class TargetError(TokadaptError):
    """Missing or out-of-range training targets."""


class NumericsError(TokadaptError):
    """Non-finite values where finite ones are required."""
