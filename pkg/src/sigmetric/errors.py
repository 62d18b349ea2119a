"""Exception types raised across the package.

Class names double as the error identifiers surfaced by the command line
tool, so they intentionally mirror the failure they describe rather than
following the ``...Error`` suffix convention.
"""


class SigmetricError(Exception):
    """Base class for every domain error."""


# signal_io
class MissingFile(SigmetricError):
    pass


class EmptyFile(SigmetricError):
    pass


class RaggedRows(SigmetricError):
    pass


class NonNumericCell(SigmetricError):
    def __init__(self, path, row, column, value):
        super().__init__(f"{path}: non-numeric cell {value!r} at row {row}, column {column}")
        self.row = row
        self.column = column


class MalformedRecord(SigmetricError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class DuplicatePath(SigmetricError):
    pass


class TargetTooLarge(SigmetricError):
    pass


class ZeroTarget(SigmetricError):
    pass


class ColumnMismatch(SigmetricError):
    pass


class NameCollision(SigmetricError):
    pass


class InvalidSignalMatrix(SigmetricError):
    pass


# encoder
class EmptyMatrix(SigmetricError):
    pass


class NonFiniteInput(SigmetricError):
    pass


# micronet / metric
class ShapeMismatch(SigmetricError):
    pass


class ImageTooSmall(SigmetricError):
    pass


class InvalidLabel(SigmetricError):
    pass


class NonFiniteGradient(SigmetricError):
    pass


# trainer
class InsufficientClassSamples(SigmetricError):
    def __init__(self, label, count):
        super().__init__(f"class {label!r} has {count} sample(s); at least 2 are required")
        self.label = label
        self.count = count


class BatchTooSmall(SigmetricError):
    pass


class BadMagic(SigmetricError):
    pass


class ShapeManifestMismatch(SigmetricError):
    pass


class VersionUnsupported(SigmetricError):
    pass


# oneshot
class ReferenceNotFound(SigmetricError):
    def __init__(self, label):
        super().__init__(f"no reference sample found for class {label!r}")
        self.label = label


class AmbiguousReference(SigmetricError):
    def __init__(self, label, count):
        super().__init__(f"class {label!r}: reference selector matched {count} samples")
        self.label = label
        self.count = count


class EmptyBank(SigmetricError):
    pass


class NoQueries(SigmetricError):
    def __init__(self, label):
        super().__init__(f"class {label!r} has no query samples besides its reference")
        self.label = label


class KeepOutOfRange(SigmetricError):
    pass


class DegenerateData(SigmetricError):
    pass


class InvalidProtocol(SigmetricError):
    pass


# cli
class ConfigError(SigmetricError):
    pass


class DatasetTooSmall(SigmetricError):
    pass
