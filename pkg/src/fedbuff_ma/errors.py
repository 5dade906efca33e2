"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class FedBuffMAError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(FedBuffMAError, ValueError):
    """Operands have incompatible shapes or violate a structural contract."""


class InvalidInput(FedBuffMAError, ValueError):
    """An input contains NaN or infinite entries."""


class InvalidParameter(FedBuffMAError, ValueError):
    """A scalar parameter lies outside its admissible range."""


class CausalityViolation(FedBuffMAError, ValueError):
    """An update claims a model version newer than the iteration receiving it."""


class ProtocolError(FedBuffMAError, RuntimeError):
    """The buffered-aggregation protocol was driven into an invalid state."""


class NumericalFailure(FedBuffMAError, RuntimeError):
    """A factorization did not converge.

    The SHA-256 digest of the offending matrix is attached so the failure
    can be reproduced offline.
    """

    def __init__(self, message: str, matrix_hash: str | None = None) -> None:
        super().__init__(message if matrix_hash is None else f"{message} (matrix sha256={matrix_hash})")
        self.matrix_hash = matrix_hash


class DivergedError(FedBuffMAError, FloatingPointError):
    """A client or server computation produced non-finite values."""

    def __init__(self, message: str, iteration: int | None = None, client: int | None = None) -> None:
        context = []
        if iteration is not None:
            context.append(f"iteration={iteration}")
        if client is not None:
            context.append(f"client={client}")
        super().__init__(message + (f" [{', '.join(context)}]" if context else ""))
        self.iteration = iteration
        self.client = client


class SensitivityViolation(FedBuffMAError, AssertionError):
    """A private payload exceeded its certified L2 bound. Always a bug."""


class DiagnosticError(FedBuffMAError, RuntimeError):
    """A diagnostic was requested from a run that did not retain the needed traces."""
