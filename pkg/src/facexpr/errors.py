"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto
0 (success), 2 (config), 3 (data) and 4 (numerical).
"""


class FacexprError(Exception):
    exit_code = 1


class ConfigError(FacexprError):
    exit_code = 2


class DataError(FacexprError):
    exit_code = 3


class ContainerError(DataError):
    """Malformed or invariant-violating model container."""


class InsufficientDataError(DataError):
    pass


class ContractError(FacexprError, ValueError):
    """Dimension mismatch or otherwise invalid arguments."""

    exit_code = 3


class NumericalError(FacexprError):
    exit_code = 4


class RankDeficiencyError(NumericalError):
    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class DegeneracyError(NumericalError):
    def __init__(self, message, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values


class SolverError(NumericalError):
    """A block update increased the energy, or a linear solve failed."""


class TrainingError(DataError):
    pass
