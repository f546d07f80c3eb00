"""Exception hierarchy shared by all modules.

Each class carries an ``exit_code`` that the command line maps to the
process status.
"""


class DeblurError(Exception):
    exit_code = 4
    code = "ERROR"


class DimensionError(DeblurError, ValueError):
    """Raised for zero-sized inputs or sizes that do not fit together."""

    exit_code = 2
    code = "DIMENSION"


class ShapeError(DeblurError, ValueError):
    """Raised when paired arrays (features, tapes, gradients) disagree."""

    exit_code = 2
    code = "SHAPE"


class NumericError(DeblurError, ArithmeticError):
    exit_code = 4
    code = "NUMERIC"


class ConfigError(DeblurError, ValueError):
    exit_code = 2
    code = "CONFIG"


class ModelFileError(DeblurError, IOError):
    exit_code = 3
    code = "MODEL_FILE"


class CorruptModelError(ModelFileError):
    code = "MODEL_CORRUPT"


class ModelVersionError(ModelFileError):
    code = "MODEL_VERSION"


class ModelInvariantError(ModelFileError):
    code = "MODEL_INVARIANT"
