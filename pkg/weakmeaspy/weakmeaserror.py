class WeakMeasError(Exception):

    def __init__(self, reason, response=None):
        self.reason = reason
        self.response = response
        Exception.__init__(self, reason)

    def __str__(self):
        return self.reason


class DimensionMismatchError(WeakMeasError):
    pass


class SimplexDomainError(WeakMeasError):
    """Non-invertible, underflowed or otherwise out-of-domain simplex input."""
    pass


class StateValidationError(WeakMeasError):
    pass


class CompletenessError(WeakMeasError):
    """response carries the Frobenius residual of sum(M^dag M) - I."""
    pass


class NotProjectiveError(WeakMeasError):
    pass


class OutcomeImpossibleError(WeakMeasError):
    """response carries the Born probability that fell below the floor."""
    pass


class OperatorDomainError(WeakMeasError):
    pass


class InvariantViolation(WeakMeasError):
    pass


class ConfigError(WeakMeasError):
    """response carries the dotted name of the offending field."""

    def __init__(self, reason, field=None):
        WeakMeasError.__init__(self, f"{field}: {reason}" if field else reason, response=field)
        self.field = field


class PersistenceError(WeakMeasError):
    pass
