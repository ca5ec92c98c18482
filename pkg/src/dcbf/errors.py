"""Exception types shared across the package."""


class DcbfError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DcbfError):
    """A configuration value violates its documented invariants."""


class PlacementInfeasible(DcbfError):
    """Rejection sampling could not place all objects within the attempt budget."""


class CorruptSnapshot(DcbfError):
    """A world snapshot is malformed, truncated, or belongs to a different config."""


class ShapeMismatch(DcbfError):
    """Tensor shapes are incompatible with the requested operation."""


class StaleTape(DcbfError):
    """Parameters were mutated after the tape recorded them."""


class CorruptCheckpoint(DcbfError):
    """A parameter checkpoint is malformed or truncated."""


class VersionMismatch(DcbfError):
    """A serialized artifact was produced by an incompatible format or architecture."""


class ShortHistory(DcbfError):
    """An object history does not contain the required number of entries."""


class DegenerateDataset(DcbfError):
    """The dataset lacks one of the two label classes."""


class CorruptDataset(DcbfError):
    """A dataset file is malformed, truncated, or inconsistent with its manifest."""


class MissingCheckpoint(DcbfError):
    """A policy requires a trained barrier checkpoint that was not supplied."""
