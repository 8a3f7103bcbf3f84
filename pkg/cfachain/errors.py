"""
Exception hierarchy
Every failure raised by cfachain derives from ChainError
"""


class ChainError(Exception):
    """Base class for all cfachain errors"""


class ImageError(ChainError, ValueError):
    """Bad image shape, non-finite samples or mismatched dimensions"""


class PatternError(ChainError, ValueError):
    """Odd CFA dimensions or an unknown Bayer layout"""


class ImageIOError(ChainError, OSError):
    """Unreadable file, unsupported magic or out-of-range samples on write"""


class NoiseEstimationError(ChainError, ValueError):
    pass


class StabilizerError(ChainError, ValueError):
    pass


class FlowError(ChainError, ValueError):
    pass


class ConfigError(ChainError, ValueError):
    pass


class PipelineError(ChainError, RuntimeError):
    """Raised by the synchronous pipeline wrapper when a phase failed"""

    def __init__(self, message: str, phase: str = "unknown"):
        super().__init__(message)
        self.phase = phase
