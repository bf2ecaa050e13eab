"""Exception hierarchy shared by the library and the command line."""


class TowerlabError(Exception):
    """Base class. ``code`` is a stable machine-readable identifier."""

    code = "ERROR"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class InputError(TowerlabError, ValueError):
    """Bad arguments or configuration (exit status 1 on the command line)."""

    code = "INPUT_ERROR"


class DomainError(InputError):
    code = "DOMAIN_ERROR"


class BudgetExceeded(InputError):
    code = "BUDGET_EXCEEDED"


class ReturnTimeCapExceeded(TowerlabError, RuntimeError):
    """An orbit stayed below 1/2 for more than the configured cap."""

    code = "RETURN_CAP_EXCEEDED"


class InvariantViolation(TowerlabError, AssertionError):
    """A checked mathematical invariant failed (exit status 2)."""

    code = "INVARIANT_VIOLATION"
