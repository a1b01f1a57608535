"""Exception hierarchy.

Input problems (bad files, bad shapes, too little data) derive from
:class:`InputError`; failures of the numerics derive from
:class:`NumericalError`. The CLI maps the two families to exit codes 2 and 3.
"""


class HistSdeError(Exception):
    """Base class for all package errors."""


class InputError(HistSdeError, ValueError):
    pass


class NumericalError(HistSdeError, ArithmeticError):
    pass


class SymmetryError(InputError):
    pass


class NotPsdError(NumericalError):
    pass


class DegenerateCovarianceError(NumericalError):
    pass


class ParseError(InputError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DuplicateKeyError(InputError):
    pass


class SchemaError(InputError):
    pass


class InsufficientDataError(InputError):
    pass


class DegenerateColumnError(InputError):
    pass


class DegenerateSeriesError(InputError):
    pass


class ModelEvaluationError(NumericalError):
    def __init__(self, message, x=None, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.x = x
        self.step = step


class DegenerateKdeError(NumericalError):
    pass


class DegenerateWeightsError(NumericalError):
    def __init__(self, message, max_logweight=None):
        super().__init__(message)
        self.max_logweight = max_logweight


class DivergenceError(NumericalError):
    pass


class ConditioningError(NumericalError):
    pass
