"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A model, layer, or dataset recipe is internally inconsistent."""


class FormatError(ValueError):
    """A binary or text artifact does not conform to its declared format.

    Carries enough location detail (byte offset or line number) to point at
    the first offending position.
    """

    def __init__(self, message, *, offset=None, line=None):
        loc = ""
        if offset is not None:
            loc = f" (byte offset {offset})"
        elif line is not None:
            loc = f" (line {line})"
        super().__init__(message + loc)
        self.offset = offset
        self.line = line


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; references the last good checkpoint."""

    def __init__(self, step, checkpoint_path=None):
        ref = f"; last good checkpoint: {checkpoint_path}" if checkpoint_path else ""
        super().__init__(f"non-finite loss at step {step}{ref}")
        self.step = step
        self.checkpoint_path = checkpoint_path
