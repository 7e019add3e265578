"""Exception types shared across the package."""

from __future__ import annotations


class EllipticityError(ValueError):
    """A coefficient tensor failed the symmetric-positive-definite check."""


class MisalignmentError(ValueError):
    """A boundary segment endpoint does not coincide with a mesh node."""


class MeshIdentificationError(RuntimeError):
    """Periodic identification left more than the constant null space."""


class ParameterRangeError(ValueError):
    """A tabulated map was queried outside its parameter range."""

    def __init__(self, value: float, lo: float, hi: float, context: str = ""):
        self.value = float(value)
        self.lo = float(lo)
        self.hi = float(hi)
        self.context = context
        where = f" ({context})" if context else ""
        super().__init__(
            f"parameter {self.value:.6g} outside tabulated range "
            f"[{self.lo:.6g}, {self.hi:.6g}]{where}"
        )


class SolverError(RuntimeError):
    """A linear solve did not reach the requested residual."""

    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan")):
        self.iterations = int(iterations)
        self.residual = float(residual)
        super().__init__(f"{message} (iterations={self.iterations}, residual={self.residual:.3e})")


class ForwardEvalError(RuntimeError):
    """A forward-model evaluation failed for a specific particle."""

    def __init__(self, iteration: int, particle: int, cause: Exception):
        self.iteration = int(iteration)
        self.particle = int(particle)
        self.cause = cause
        super().__init__(
            f"forward evaluation failed at iteration {iteration}, particle {particle}: {cause}"
        )


class ConfigError(ValueError):
    """A run configuration file is malformed or inconsistent."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message if key is None else f"config key '{key}': {message}")
