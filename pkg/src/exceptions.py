from typing import Optional, Tuple


class GcdError(Exception):
    """Base class of every error raised by the laboratory."""

    kind = "gcd_error"


class ShapeMismatchError(GcdError, ValueError):
    """A node received inputs whose shapes do not fit its op-kind."""

    kind = "shape_mismatch"

    def __init__(self, node_id: int, expected: str, actual: Tuple[int, ...], detail: str = "") -> None:
        self.node_id = node_id
        self.expected = expected
        self.actual = actual
        message = f"node {node_id}: expected shape {expected}, got {actual}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class NonFiniteValueError(GcdError, ArithmeticError):
    """A forward pass produced NaN or Inf."""

    kind = "non_finite_value"

    def __init__(self, node_id: int, op_kind: str) -> None:
        self.node_id = node_id
        self.op_kind = op_kind
        super().__init__(f"node {node_id} ({op_kind}) produced a non-finite value")


class ZeroNormError(GcdError, ValueError):
    """Row normalisation met an all-zero row."""

    kind = "zero_norm"


class GraphStateError(GcdError, RuntimeError):
    """Backward was requested on a graph that cannot provide it."""

    kind = "graph_state"


class InvalidConfigError(GcdError, ValueError):
    kind = "invalid_config"


class MalformedFileError(GcdError, ValueError):
    """A dataset, checkpoint or CSV file could not be parsed."""

    kind = "malformed_file"

    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        self.offset = offset
        if offset is not None:
            message = f"{message} at byte {offset}"
        super().__init__(message)


class InvariantViolationError(GcdError):
    """A dataset breaks one of its structural invariants."""

    kind = "invariant_violation"


class NoPositivesError(GcdError, ValueError):
    kind = "no_positives"


class BatchTooSmallError(GcdError, ValueError):
    kind = "batch_too_small"


class NonStochasticError(GcdError, ValueError):
    kind = "non_stochastic"


class SupervisionModeError(GcdError, ValueError):
    kind = "supervision_mode"


class EmptyEvaluationError(GcdError, ValueError):
    kind = "empty_evaluation"


class NumericalAbortError(GcdError, ArithmeticError):
    """Training stopped on a non-finite objective or a zero-norm row."""

    kind = "numerical_abort"

    def __init__(self, message: str, breakdown: Optional[dict] = None) -> None:
        self.breakdown = breakdown or {}
        super().__init__(f"{message}; last breakdown={self.breakdown}")
