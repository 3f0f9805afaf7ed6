"""Error hierarchy and input validation utilities for LoraFuse.

Provides reusable validation functions for the numeric and configuration
inputs shared across the application. Every error raised by the library is a
subclass of ``LoraFuseError``; the CLI maps ``ValidationError`` to exit code 2
and ``NumericError`` to exit code 3.
"""

import math
from typing import Any, Optional

import numpy as np


class LoraFuseError(Exception):
    """Base class for all LoraFuse errors."""

    pass


class ValidationError(LoraFuseError, ValueError):
    """Raised when input validation fails."""

    pass


class DimensionError(ValidationError):
    """Raised when tensor shapes do not chain."""

    pass


class ContractError(ValidationError):
    """Raised when an operation is called outside its contract."""

    pass


class PreconditionError(ValidationError):
    """Raised when an input violates a documented precondition."""

    pass


class DegenerateInputError(ValidationError):
    """Raised for zero-norm vectors where a direction is required."""

    pass


class DivergenceUndefinedError(ValidationError):
    """Raised when KL(p || q) is infinite because q misses p's support."""

    pass


class UnknownInputError(ValidationError):
    """Raised when a gradient is requested for a tensor never registered on the trace."""

    pass


class ConfigError(ValidationError):
    """Raised for malformed or unknown run configuration keys."""

    pass


class WeightFormatError(ValidationError):
    """Raised when a weight file cannot be decoded."""

    def __init__(self, message: str, tensor_name: Optional[str] = None) -> None:
        """Initialize the error.

        Args:
            message: Description of the problem.
            tensor_name: Name of the offending tensor, if one is involved.
        """
        self.tensor_name = tensor_name
        if tensor_name is not None:
            message = f"{message} (tensor '{tensor_name}')"
        super().__init__(message)


class TraceParseError(ValidationError):
    """Raised when a selection-trace CSV is malformed."""

    def __init__(self, message: str, line: int) -> None:
        """Initialize the error.

        Args:
            message: Description of the problem.
            line: 1-based line number in the CSV file.
        """
        self.line = line
        super().__init__(f"line {line}: {message}")


class NumericError(LoraFuseError, ArithmeticError):
    """Raised when a computation produces unusable numbers."""

    pass


class NonFiniteError(NumericError):
    """Raised when an operation yields NaN or Inf."""

    pass


class GuidanceError(NumericError):
    """Raised when the guided correction cannot be computed."""

    def __init__(
        self,
        message: str,
        step: Optional[int],
        residual: Optional[float] = None,
        grad_norm: Optional[float] = None,
        timestep: Optional[int] = None,
    ) -> None:
        """Initialize the error.

        Args:
            message: Description of the failure.
            step: 0-based sampling step index at which guidance failed, or None
                when the step was run outside a sampling loop.
            residual: Residual value, if it was computed.
            grad_norm: Gradient norm, if it was computed and finite.
            timestep: Diffusion timestep t of the failed step.
        """
        self.step = step
        self.residual = residual
        self.grad_norm = grad_norm
        self.timestep = timestep
        where = f"step {step}" if step is not None else "a step"
        if timestep is not None:
            where += f" (t={timestep})"
        super().__init__(
            f"guidance failed at {where}, residual={residual}, |g|={grad_norm}: {message}"
        )


class TrainingDivergedError(NumericError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, loss: float) -> None:
        """Initialize the error.

        Args:
            step: Optimizer step at which the loss diverged.
            loss: The offending loss value.
        """
        self.step = step
        self.loss = loss
        super().__init__(f"training loss became {loss} at step {step}")


def validate_positive_integer(value: Any, name: str = "value") -> int:
    """Validate that a value is a positive integer.

    Args:
        value: Value to validate.
        name: Name of the value for error messages.

    Returns:
        The validated integer.

    Raises:
        ValidationError: If value is not a positive integer.
    """
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ValidationError(f"{name} must be an integer, got {type(value).__name__}")

    if value <= 0:
        raise ValidationError(f"{name} must be positive, got {value}")

    return int(value)


def validate_non_negative_integer(value: Any, name: str = "value") -> int:
    """Validate that a value is an integer >= 0.

    Args:
        value: Value to validate.
        name: Name of the value for error messages.

    Returns:
        The validated integer.

    Raises:
        ValidationError: If value is negative or not an integer.
    """
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ValidationError(f"{name} must be an integer, got {type(value).__name__}")

    if value < 0:
        raise ValidationError(f"{name} must be non-negative, got {value}")

    return int(value)


def validate_even(value: Any, name: str = "value") -> int:
    """Validate that a value is a positive even integer.

    Raises:
        ContractError: If the integer is odd.
    """
    value = validate_positive_integer(value, name)
    if value % 2:
        raise ContractError(f"{name} must be even, got {value}")
    return value


def validate_finite_scalar(value: Any, name: str = "value") -> float:
    """Validate that a value is a finite real number.

    Args:
        value: Value to validate.
        name: Name of the value for error messages.

    Returns:
        The value as a float.

    Raises:
        ValidationError: If value is not a number.
        ContractError: If value is NaN or infinite.
    """
    if isinstance(value, bool) or not isinstance(value, (int, float, np.floating, np.integer)):
        raise ValidationError(f"{name} must be a number, got {type(value).__name__}")

    value = float(value)
    if not math.isfinite(value):
        raise ContractError(f"{name} must be finite, got {value}")

    return value


def validate_non_negative(value: Any, name: str = "value") -> float:
    """Validate that a value is a finite number >= 0."""
    value = validate_finite_scalar(value, name)
    if value < 0:
        raise ValidationError(f"{name} must be non-negative, got {value}")
    return value


def validate_finite_array(array: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate that every entry of an array is finite.

    Raises:
        NonFiniteError: If any entry is NaN or infinite.
    """
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NonFiniteError(f"{name} has {bad} non-finite entries")
    return array


def validate_probability_vector(array: np.ndarray, name: str = "p", tol: float = 1e-9) -> np.ndarray:
    """Validate a 1-D probability vector.

    Args:
        array: Candidate distribution.
        name: Name used in error messages.
        tol: Allowed deviation of the sum from 1.

    Returns:
        The validated array.

    Raises:
        DimensionError: If the array is not a non-empty vector.
        PreconditionError: If entries are negative or the sum is not 1.
    """
    if array.ndim != 1 or array.size == 0:
        raise DimensionError(f"{name} must be a non-empty vector, got shape {array.shape}")

    if np.any(array < 0):
        raise PreconditionError(f"{name} has negative entries")

    total = float(np.sum(array))
    if abs(total - 1.0) > tol:
        raise PreconditionError(f"{name} must sum to 1 within {tol}, got {total!r}")

    return array


def validate_choice(value: str, choices: set[str], name: str = "value") -> str:
    """Validate that a string is one of a fixed set of names.

    Raises:
        ValidationError: If value is not a known choice.
    """
    if value not in choices:
        raise ValidationError(
            f"Invalid {name} '{value}'. Valid values are: {', '.join(sorted(choices))}"
        )
    return value
