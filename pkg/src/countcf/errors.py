"""Exception hierarchy; the CLI maps each branch to its own exit code."""


class CountCFError(Exception):
    """Base class for package errors."""


class SchemaError(CountCFError, ValueError):
    """Input data or configuration does not match the declared schema."""


class ConsistencyError(SchemaError):
    """Row-level invariant violated (e.g. an outcome on an unselected row)."""


class DegenerateSampleError(CountCFError, ValueError):
    """A model was requested on an empty or one-class sample."""


class FitError(CountCFError):
    """Estimation failed."""


class DomainError(FitError, ValueError):
    """An outcome lies outside the support of the requested family."""


class ParameterError(FitError, ValueError):
    """Non-finite or inadmissible distribution parameters."""


class OptimizationError(FitError):
    """The optimizer could not find an ascent step from a finite point."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class SeparationError(FitError):
    """Perfect or quasi-perfect separation in a binary model."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class StageError(FitError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class ReportError(CountCFError, ValueError):
    """A document cannot be rendered in the requested style."""


class OrchestrationError(CountCFError):
    """A batch run failed as a whole (worker crash, every replication failed)."""
