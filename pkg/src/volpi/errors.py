"""Exception types shared across the package."""


class VolpiError(Exception):
    """Base class for package-specific failures."""


class ConfigError(VolpiError):
    """Invalid configuration file or flag combination."""


class FormatError(VolpiError):
    """On-disk artifact is malformed; message names the offending field/file."""


class ShapeError(VolpiError):
    """Array shape incompatible with a network or operation."""


class MissingArtifactError(VolpiError):
    """A required checkpoint, dataset or calibration file does not exist."""


class NumericalError(VolpiError):
    """Non-finite value encountered where the pipeline cannot proceed."""
