"""Exception types shared across the package."""


class RagletError(Exception):
    """Base class for all package errors."""


class UsageError(RagletError):
    """Caller violated a documented precondition (bad config, bad argument)."""


class ShapeError(RagletError):
    """Tensor shapes do not line up for the requested operation."""


class NumericError(RagletError):
    """NaN/Inf encountered, or an op was fed non-finite inputs."""


class IngestError(RagletError):
    """Corpus input could not be read or parsed."""


class StaleIndexError(RagletError):
    """A batch plan was requested against an index from the wrong refresh epoch."""


class CheckpointError(RagletError):
    """Checkpoint or embedding-table file is malformed or inconsistent."""
