"""Exception hierarchy shared by every module."""


class LipreadError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LipreadError, ValueError):
    """Tensor extents are invalid or incompatible."""


class ContractError(LipreadError, ValueError):
    """A documented precondition does not hold."""


class FormatError(LipreadError, ValueError):
    """A binary file (.flo, checkpoint) is malformed or corrupted."""


class IngestionError(LipreadError, OSError):
    """Frames or manifests could not be read."""


class ConfigError(LipreadError, ValueError):
    """An experiment configuration violates a rule."""


class MappingError(LipreadError, ValueError):
    """Layers cannot be matched between a 2D source and 3D target network."""


class DivergenceError(LipreadError, ArithmeticError):
    """Training produced a non-finite loss."""
