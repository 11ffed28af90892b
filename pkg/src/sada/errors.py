"""Exception hierarchy shared by every stage of the pipeline."""


class SadaError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SadaError, ValueError):
    """An argument violates a documented precondition (shape, range, finiteness)."""


class IDXFormatError(SadaError, ValueError):
    """Malformed IDX container. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDivergedError(SadaError, RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(SadaError):
    """Bad or inconsistent experiment configuration (CLI exit code 2)."""


class RunStateError(SadaError):
    """A cached stage artifact in a run directory could not be loaded."""

    def __init__(self, stage, path, cause=None):
        msg = f"corrupt state in stage '{stage}': {path}"
        if cause is not None:
            msg += f" ({cause})"
        super().__init__(msg)
        self.stage = stage
        self.path = path
