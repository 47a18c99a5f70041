"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition of an operation."""


class NumericalError(RuntimeError):
    """A numerical routine failed.

    Carries enough context to locate the failure: ``pivot_index`` for
    factorization breakdowns, ``detail`` for anything else (e.g. a report of
    the offending regression basis).
    """

    def __init__(self, message, *, pivot_index=None, detail=None):
        super().__init__(message)
        self.pivot_index = pivot_index
        self.detail = detail
