"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class LegnnError(Exception):
    code = "error"


class DimensionError(LegnnError, ValueError):
    code = "dimension"


class CorruptMatrixError(LegnnError, ValueError):
    code = "corrupt_matrix"


class ContractError(LegnnError):
    code = "contract"


class NonFiniteError(LegnnError, FloatingPointError):
    code = "non_finite"


class FormatError(LegnnError, ValueError):
    """Malformed dataset file. ``path`` and ``line`` point at the offender."""

    code = "format"

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class CapacityError(LegnnError):
    code = "capacity"


class UndefinedValueError(LegnnError, ValueError):
    code = "undefined"


class DegenerateSplitError(LegnnError, ValueError):
    code = "degenerate_split"


class UsageError(LegnnError, ValueError):
    code = "usage"


class TrainingAborted(LegnnError):
    code = "training_aborted"
