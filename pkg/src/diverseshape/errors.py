"""Exception types shared across the package."""


class MeshFormatError(ValueError):
    """Malformed mesh file (bad record, bad index); message carries the line number."""


class DegenerateSelectionError(ValueError):
    """Point selection too thin (collinear / fewer than 3 points) for rigid alignment."""


class ModelFormatError(ValueError):
    """Model container is corrupt: bad magic, truncated payload, or garbage trailer."""


class ModelVersionError(ModelFormatError):
    """Model container written with an unsupported format version."""


class InsufficientDataError(ValueError):
    """Not enough samples (or variance) to train the requested number of components."""


class RankDeficiencyError(ValueError):
    """Generated displacement fields collapsed during orthonormalization."""


class DivergenceError(ArithmeticError):
    """Iterative optimization produced a non-finite or exploding loss."""


class ConfigError(ValueError):
    """Bad run configuration: unknown key, missing file, or unparseable value."""
