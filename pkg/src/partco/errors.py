"""Exception types. CLI exit codes hang off these classes."""


class PartcoError(Exception):
    exit_code = 1


class ValidationError(PartcoError, ValueError):
    """Bad arguments, bad manifests, inconsistent inputs."""


class DimensionError(ValidationError):
    pass


class DegenerateDataError(PartcoError, ValueError):
    """Input has no usable variation (constant features, no foreground, ...)."""


class FormatError(PartcoError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalAbort(PartcoError):
    """A loss went non-finite during training."""

    exit_code = 3

    def __init__(self, component, step=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in loss component '{component}'{where}")
        self.component = component
        self.step = step
