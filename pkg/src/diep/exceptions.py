"""Exception types raised across the package."""


class DiEPError(Exception):
    """Base class for package errors."""


class ConfigError(DiEPError, ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CapacityError(DiEPError, ValueError):
    """Fewer experts available than routing or enumeration requires."""


class FeasibilityError(DiEPError, ValueError):
    """Requested pruning count cannot satisfy the per-layer floor."""

    def __init__(self, requested: int, max_feasible: int):
        self.requested = requested
        self.max_feasible = max_feasible
        super().__init__(
            f"cannot prune {requested} experts; at most {max_feasible} can be removed "
            "while every layer keeps top_k experts"
        )


class SpecError(DiEPError, ValueError):
    """Malformed task or redundancy specification."""


class TrainingError(DiEPError, RuntimeError):
    """Pretraining diverged."""

    def __init__(self, message: str, history=None):
        self.history = list(history or [])
        super().__init__(message)


class OptimizationError(DiEPError, RuntimeError):
    """Importance-score search hit a non-finite loss or gradient."""

    def __init__(self, message: str, step: int, state=None):
        self.step = step
        self.state = state
        super().__init__(f"step {step}: {message}")


class DegenerateKernelError(DiEPError, ValueError):
    """RBF bandwidth is zero because all rows coincide."""


class DegenerateFeatureError(DiEPError, ValueError):
    """CKA is undefined because a feature matrix is constant."""


class ComparisonError(DiEPError, ValueError):
    """Two statistics records refer to different token streams."""


class CompatibilityError(DiEPError, ValueError):
    """Artifacts (model, mask, data) do not fit together."""


class SchemaError(DiEPError, ValueError):
    """Serialized artifact has an unknown format or version."""
