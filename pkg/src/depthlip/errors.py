"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(PipelineError):
    """A file on disk does not conform to its documented format."""


class TrainingDivergence(PipelineError):
    """Training produced a non-finite loss; carries the offending step."""

    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step
