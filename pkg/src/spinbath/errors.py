"""
Contains the exceptions raised by spinbath. Every error carries a stable code, which is what the command line
interface reports in its error object.
"""
from typing import Any, Dict, Optional


class SpinBathError(Exception):
    """
    Base class of all spinbath errors
    """
    code: str = "spinbath_error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_record(self) -> Dict[str, Any]:
        """
        :return: machine-readable representation of the error
        """
        return {"error": self.code, "message": self.message, "details": self.details}


class ConfigError(SpinBathError, ValueError):
    code = "config_error"

    def __init__(self, message: str, line: Optional[int] = None, field_path: Optional[str] = None):
        if line is not None:
            message = f"line {line}: {message}"
        if field_path is not None:
            message = f"{field_path}: {message}"
        super().__init__(message, line=line, field_path=field_path)
        self.line = line
        self.field_path = field_path


class UnsupportedSpinError(SpinBathError, ValueError):
    code = "unsupported_spin"


class NonHermitianError(SpinBathError, ValueError):
    code = "non_hermitian"


class ConvergenceError(SpinBathError, ArithmeticError):
    code = "no_convergence"


class DegenerateGradientError(SpinBathError, ArithmeticError):
    code = "degenerate_gradient"


class UndefinedRateError(SpinBathError, ArithmeticError):
    code = "undefined_rate"


class ZeroFrequencyError(SpinBathError, ValueError):
    code = "zero_frequency"


class SingularJacobianError(SpinBathError, ArithmeticError):
    code = "singular_jacobian"


class FitDivergenceError(SpinBathError, ArithmeticError):
    code = "fit_divergence"


class BoundsError(SpinBathError, ValueError):
    code = "bounds_violation"


class MissingSeedError(SpinBathError, ValueError):
    code = "missing_seed"


class InvalidArgumentsError(SpinBathError, ValueError):
    code = "invalid_arguments"
