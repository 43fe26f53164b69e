"""Exception types shared across the package."""


class QtmineError(Exception):
    """Base class for all errors raised by this package."""


class DataFormatError(QtmineError):
    """A data file is missing, malformed beyond recovery, or violates its schema."""


class CheckpointError(QtmineError):
    """A checkpoint file is corrupt, truncated, or inconsistent with its sidecar."""


class TemplateError(QtmineError):
    """A query template is unusable (no mask placeholder, missing slot, too long)."""


class EvalError(QtmineError):
    """An evaluation cannot proceed (empty item set, missing category, bad k)."""
