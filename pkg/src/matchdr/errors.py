"""Exception and warning types raised across the pipeline."""


class MatchdrError(Exception):
    """Base class for all library errors."""


class ConfigError(MatchdrError):
    """Invalid or incomplete configuration."""


class MissingColumn(MatchdrError):
    pass


class NonBinaryTreatment(MatchdrError):
    pass


class ParseError(MatchdrError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class LeakageDetected(MatchdrError):
    pass


class MissingPoSWindow(MatchdrError):
    pass


class SeparationError(MatchdrError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class RankDeficient(MatchdrError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class NoConvergence(MatchdrError):
    pass


class EmptySupport(MatchdrError):
    pass


class NoComparableCovariates(MatchdrError):
    pass


class NoInformativePairs(MatchdrError):
    pass


class InvalidGamma(MatchdrError, ValueError):
    pass


class InvalidSpec(MatchdrError, ValueError):
    pass


class StageError(MatchdrError):
    """Wraps a failure inside a named pipeline stage."""

    def __init__(self, stage, error):
        super().__init__(f"stage '{stage}' failed: {error}")
        self.stage = stage
        self.error = error


class MatchdrWarning(UserWarning):
    pass


class EmptyColumnWarning(MatchdrWarning):
    pass


class DegenerateLogits(MatchdrWarning):
    pass


class DegenerateVariance(MatchdrWarning):
    pass


class DegenerateResample(MatchdrWarning):
    pass


class ConstantVariable(MatchdrWarning):
    pass
