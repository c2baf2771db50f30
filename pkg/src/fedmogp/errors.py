"""Exception types shared across the package."""

import numpy as np


class InputError(ValueError):
    """Invalid argument: wrong shape, out-of-range value, bad label."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class SingularMatrixError(np.linalg.LinAlgError):
    """A covariance matrix could not be factorized even after jitter escalation."""


class ParseError(InputError):
    """Malformed dataset, manifest or config file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class FederationError(RuntimeError):
    """A client or server step failed; carries the round and client involved."""

    def __init__(self, message, round_index=None, client_id=None):
        self.round_index = round_index
        self.client_id = client_id
        ctx = []
        if round_index is not None:
            ctx.append(f"round {round_index}")
        if client_id is not None:
            ctx.append(f"client {client_id}")
        super().__init__((", ".join(ctx) + ": " if ctx else "") + message)
