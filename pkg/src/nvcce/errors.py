"""Exception types shared across the package."""

import numpy as np


class ConfigurationError(ValueError):
    """Invalid physical or run configuration."""


class NumericalError(ArithmeticError):
    """A linear-algebra routine failed; carries basic matrix diagnostics."""

    def __init__(self, message, matrix=None):
        if matrix is not None:
            m = np.asarray(matrix)
            finite = np.isfinite(m)
            message = (
                f"{message} [shape={m.shape}, max|entry|={np.abs(m[finite]).max() if finite.any() else 'n/a'}, "
                f"non-finite={int((~finite).sum())}]"
            )
        super().__init__(message)
