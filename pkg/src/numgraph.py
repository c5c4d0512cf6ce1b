"""
Dense-matrix compute graph with reverse-mode differentiation.

Only the op-kinds the training objective needs are supported. Nodes are
appended in construction order, which is a topological order because a node
can only reference parents that already exist.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import (GraphStateError, NonFiniteValueError, ShapeMismatchError,
                            ZeroNormError)


Matrix = np.ndarray


class OpKind(str, Enum):
    PARAMETER = "parameter"
    CONSTANT = "constant"
    MATMUL = "matmul"
    ADD = "add"
    SCALE = "scale"
    ROW_L2_NORMALIZE = "row_l2_normalize"
    ROW_SOFTMAX = "row_softmax"
    LOG = "log"
    EXP = "exp"
    RELU = "relu"
    MEAN_ROWS = "mean_rows"
    SUM = "sum"
    SOFT_CROSS_ENTROPY = "soft_cross_entropy"
    NEGATE = "negate"
    ENTROPY = "entropy"
    STOP_GRADIENT = "stop_gradient"
    SELECT_ROWS = "select_rows"


@dataclass
class Node:
    id: int
    kind: OpKind
    parents: Tuple[int, ...]
    attrs: Dict[str, Any] = field(default_factory=dict)
    value: Optional[Matrix] = None
    adjoint: Optional[Matrix] = None


def as_matrix(value: Any) -> Matrix:
    """Coerces scalars, vectors and nested lists into a 2-D float64 array."""
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(1, -1)
    if array.ndim != 2:
        raise ValueError(f"Matrix must be 2-D, got {array.ndim} dimensions")
    return array


class ComputeGraph:
    """
    Expression DAG over matrices.

    Build the graph with the op methods, run `forward` with values for every
    parameter leaf, then `backward` from a 1x1 loss node. A graph instance is
    meant for a single thread.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.leaves: Dict[str, int] = {}
        self._forward_done = False

    # ------------------------------------------------------------------ build

    def _add(self, kind: OpKind, parents: Sequence[int] = (), **attrs: Any) -> int:
        for parent in parents:
            if not 0 <= parent < len(self.nodes):
                raise GraphStateError(f"unknown parent node {parent} for {kind.value}")
        node = Node(id=len(self.nodes), kind=kind, parents=tuple(parents), attrs=attrs)
        self.nodes.append(node)
        self._forward_done = False
        return node.id

    def parameter(self, name: str) -> int:
        """Declares a trainable leaf identified by `name`."""
        if name in self.leaves:
            return self.leaves[name]
        node_id = self._add(OpKind.PARAMETER, name=name)
        self.leaves[name] = node_id
        return node_id

    def constant(self, value: Any) -> int:
        return self._add(OpKind.CONSTANT, value=as_matrix(value).copy())

    def matmul(self, a: int, b: int, transpose_b: bool = False) -> int:
        return self._add(OpKind.MATMUL, (a, b), transpose_b=transpose_b)

    def add(self, a: int, b: int) -> int:
        """Elementwise sum; `b` may also be a 1xC row added to every row of `a`."""
        return self._add(OpKind.ADD, (a, b))

    def scale(self, a: int, factor: float) -> int:
        return self._add(OpKind.SCALE, (a,), factor=float(factor))

    def row_l2_normalize(self, a: int) -> int:
        return self._add(OpKind.ROW_L2_NORMALIZE, (a,))

    def row_softmax(self, a: int, tau: float = 1.0) -> int:
        if tau <= 0:
            raise ValueError(f"softmax temperature must be > 0, got {tau}")
        return self._add(OpKind.ROW_SOFTMAX, (a,), tau=float(tau))

    def log(self, a: int) -> int:
        return self._add(OpKind.LOG, (a,))

    def exp(self, a: int) -> int:
        return self._add(OpKind.EXP, (a,))

    def relu(self, a: int) -> int:
        return self._add(OpKind.RELU, (a,))

    def mean_rows(self, a: int) -> int:
        """Column-wise mean over rows, B x C -> 1 x C."""
        return self._add(OpKind.MEAN_ROWS, (a,))

    def sum(self, a: int) -> int:
        return self._add(OpKind.SUM, (a,))

    def soft_cross_entropy(self, p: int, q: int) -> int:
        """Mean over rows of -sum_k q log p; entries with q == 0 contribute nothing."""
        return self._add(OpKind.SOFT_CROSS_ENTROPY, (p, q))

    def negate(self, a: int) -> int:
        return self._add(OpKind.NEGATE, (a,))

    def entropy(self, a: int) -> int:
        """-sum x log x over every entry, with 0 log 0 = 0."""
        return self._add(OpKind.ENTROPY, (a,))

    def stop_gradient(self, a: int) -> int:
        return self._add(OpKind.STOP_GRADIENT, (a,))

    def select_rows(self, a: int, rows: Sequence[int]) -> int:
        return self._add(OpKind.SELECT_ROWS, (a,), rows=np.asarray(rows, dtype=np.int64))

    # ---------------------------------------------------------------- forward

    def forward(self, leaf_values: Mapping[str, Any], output: Optional[int] = None) -> Matrix:
        """
        Evaluates every node.

        Args:
            leaf_values: Value for each parameter leaf, keyed by leaf name.
            output: Node whose value is returned; defaults to the last node.

        Returns:
            Value of the output node.

        Raises:
            GraphStateError: If a parameter leaf has no value.
            ShapeMismatchError: If a node gets inputs of the wrong shape.
            NonFiniteValueError: On the first node producing NaN or Inf.
        """
        if not self.nodes:
            raise GraphStateError("graph is empty")
        missing = [name for name in self.leaves if name not in leaf_values]
        if missing:
            raise GraphStateError(f"leaves without value: {missing}")

        for node in self.nodes:
            if node.kind is OpKind.PARAMETER:
                value = as_matrix(leaf_values[node.attrs["name"]]).copy()
            elif node.kind is OpKind.CONSTANT:
                value = node.attrs["value"]
            else:
                args = [self.nodes[p].value for p in node.parents]
                value = _FORWARD[node.kind](node, *args)
            if not np.all(np.isfinite(value)):
                raise NonFiniteValueError(node.id, node.kind.value)
            node.value = value
            node.adjoint = None

        self._forward_done = True
        target = self.nodes[-1] if output is None else self.nodes[output]
        return target.value

    def value(self, node_id: int) -> Matrix:
        node = self.nodes[node_id]
        if node.value is None:
            raise GraphStateError(f"node {node_id} has no value, run forward first")
        return node.value

    def scalar(self, node_id: int) -> float:
        return float(self.value(node_id)[0, 0])

    # --------------------------------------------------------------- backward

    def backward(self, loss_node: int) -> Dict[str, Matrix]:
        """
        Reverse-mode sweep from a scalar node.

        Args:
            loss_node: Id of a 1x1 node.

        Returns:
            Gradient of the loss for every parameter leaf, keyed by leaf name.

        Raises:
            GraphStateError: If forward has not run or the loss is not 1x1.
        """
        if not self._forward_done:
            raise GraphStateError("backward called before forward")
        loss = self.nodes[loss_node]
        if loss.value.shape != (1, 1):
            raise GraphStateError(f"loss node {loss_node} is not scalar: {loss.value.shape}")

        for node in self.nodes:
            node.adjoint = np.zeros_like(node.value)
        loss.adjoint = np.ones((1, 1))

        for node in reversed(self.nodes[: loss_node + 1]):
            if node.kind in (OpKind.PARAMETER, OpKind.CONSTANT, OpKind.STOP_GRADIENT):
                continue
            if not np.any(node.adjoint):
                continue
            args = [self.nodes[p].value for p in node.parents]
            grads = _BACKWARD[node.kind](node, node.adjoint, *args)
            for parent, grad in zip(node.parents, grads):
                if grad is not None:
                    self.nodes[parent].adjoint = self.nodes[parent].adjoint + grad

        return {name: self.nodes[node_id].adjoint.copy() for name, node_id in self.leaves.items()}


# ---------------------------------------------------------------------------
# op-kind rules


def _check(condition: bool, node: Node, expected: str, actual: Tuple[int, ...], detail: str = "") -> None:
    if not condition:
        raise ShapeMismatchError(node.id, expected, actual, detail)


def _forward_matmul(node: Node, a: Matrix, b: Matrix) -> Matrix:
    if node.attrs["transpose_b"]:
        _check(a.shape[1] == b.shape[1], node, f"(*, {a.shape[1]}) for b", b.shape, "a @ b.T")
        return a @ b.T
    _check(a.shape[1] == b.shape[0], node, f"({a.shape[1]}, *) for b", b.shape, "a @ b")
    return a @ b


def _forward_add(node: Node, a: Matrix, b: Matrix) -> Matrix:
    row_broadcast = b.shape[0] == 1 and b.shape[1] == a.shape[1]
    _check(a.shape == b.shape or row_broadcast, node, str(a.shape), b.shape)
    return a + b


def _forward_normalize(node: Node, a: Matrix) -> Matrix:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms == 0):
        row = int(np.flatnonzero(norms[:, 0] == 0)[0])
        raise ZeroNormError(f"node {node.id}: row {row} has zero norm and cannot be normalised")
    return a / norms


def softmax_rows(a: Matrix, tau: float = 1.0) -> Matrix:
    """Numerically stable row softmax of a / tau."""
    shifted = a / tau
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def _forward_cross_entropy(node: Node, p: Matrix, q: Matrix) -> Matrix:
    _check(p.shape == q.shape, node, str(p.shape), q.shape, "target")
    support = q != 0
    log_p = np.log(np.where(support, p, 1.0))
    return np.array([[-np.sum(q * log_p) / p.shape[0]]])


def _forward_entropy(node: Node, a: Matrix) -> Matrix:
    positive = a > 0
    log_a = np.log(np.where(positive, a, 1.0))
    return np.array([[-np.sum(a * log_a)]])


def _forward_select(node: Node, a: Matrix) -> Matrix:
    rows = node.attrs["rows"]
    _check(rows.size == 0 or (rows.min() >= 0 and rows.max() < a.shape[0]), node,
           f"row indices < {a.shape[0]}", a.shape, "select_rows")
    return a[rows]


def _forward_log(node: Node, a: Matrix) -> Matrix:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a)


_FORWARD: Dict[OpKind, Callable[..., Matrix]] = {
    OpKind.MATMUL: _forward_matmul,
    OpKind.ADD: _forward_add,
    OpKind.SCALE: lambda node, a: a * node.attrs["factor"],
    OpKind.ROW_L2_NORMALIZE: _forward_normalize,
    OpKind.ROW_SOFTMAX: lambda node, a: softmax_rows(a, node.attrs["tau"]),
    OpKind.LOG: _forward_log,
    OpKind.EXP: lambda node, a: np.exp(a),
    OpKind.RELU: lambda node, a: np.maximum(a, 0.0),
    OpKind.MEAN_ROWS: lambda node, a: a.mean(axis=0, keepdims=True),
    OpKind.SUM: lambda node, a: np.array([[a.sum()]]),
    OpKind.SOFT_CROSS_ENTROPY: _forward_cross_entropy,
    OpKind.NEGATE: lambda node, a: -a,
    OpKind.ENTROPY: _forward_entropy,
    OpKind.STOP_GRADIENT: lambda node, a: a.copy(),
    OpKind.SELECT_ROWS: _forward_select,
}


def _backward_matmul(node: Node, g: Matrix, a: Matrix, b: Matrix):
    if node.attrs["transpose_b"]:
        return g @ b, g.T @ a
    return g @ b.T, a.T @ g


def _backward_add(node: Node, g: Matrix, a: Matrix, b: Matrix):
    if b.shape != a.shape:
        return g, g.sum(axis=0, keepdims=True)
    return g, g


def _backward_normalize(node: Node, g: Matrix, a: Matrix):
    y = node.value
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms,)


def _backward_softmax(node: Node, g: Matrix, a: Matrix):
    p = node.value
    return (p * (g - np.sum(g * p, axis=1, keepdims=True)) / node.attrs["tau"],)


def _backward_cross_entropy(node: Node, g: Matrix, p: Matrix, q: Matrix):
    rows = p.shape[0]
    support = q != 0
    grad_p = np.where(support, -q / np.where(support, p, 1.0), 0.0) / rows
    positive = p > 0
    grad_q = np.where(positive, -np.log(np.where(positive, p, 1.0)), 0.0) / rows
    return grad_p * g[0, 0], grad_q * g[0, 0]


def _backward_entropy(node: Node, g: Matrix, a: Matrix):
    positive = a > 0
    grad = np.where(positive, -(np.log(np.where(positive, a, 1.0)) + 1.0), 0.0)
    return (grad * g[0, 0],)


def _backward_select(node: Node, g: Matrix, a: Matrix):
    grad = np.zeros_like(a)
    np.add.at(grad, node.attrs["rows"], g)
    return (grad,)


_BACKWARD: Dict[OpKind, Callable[..., tuple]] = {
    OpKind.MATMUL: _backward_matmul,
    OpKind.ADD: _backward_add,
    OpKind.SCALE: lambda node, g, a: (g * node.attrs["factor"],),
    OpKind.ROW_L2_NORMALIZE: _backward_normalize,
    OpKind.ROW_SOFTMAX: _backward_softmax,
    OpKind.LOG: lambda node, g, a: (g / a,),
    OpKind.EXP: lambda node, g, a: (g * node.value,),
    OpKind.RELU: lambda node, g, a: (g * (a > 0),),
    OpKind.MEAN_ROWS: lambda node, g, a: (np.broadcast_to(g / a.shape[0], a.shape).copy(),),
    OpKind.SUM: lambda node, g, a: (np.full_like(a, g[0, 0]),),
    OpKind.SOFT_CROSS_ENTROPY: _backward_cross_entropy,
    OpKind.NEGATE: lambda node, g, a: (-g,),
    OpKind.ENTROPY: _backward_entropy,
    OpKind.SELECT_ROWS: _backward_select,
}


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(loss_fn: Callable[[Dict[str, Matrix]], float],
                     leaf_values: Mapping[str, Any],
                     step: float = 1e-5) -> Dict[str, Matrix]:
    """
    Central-difference gradient estimate, (f(x+h) - f(x-h)) / 2h per entry.

    Args:
        loss_fn: Deterministic map from leaf values to a scalar.
        leaf_values: Point at which the gradient is estimated.
        step: Perturbation h, must be > 0.

    Returns:
        Estimated gradient for every leaf.
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    point = {name: as_matrix(value).copy() for name, value in leaf_values.items()}
    grads: Dict[str, Matrix] = {}
    for name, value in point.items():
        grad = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            original = value[index]
            value[index] = original + step
            upper = float(loss_fn(point))
            value[index] = original - step
            lower = float(loss_fn(point))
            value[index] = original
            grad[index] = (upper - lower) / (2.0 * step)
        grads[name] = grad
    return grads


def relative_error(analytic: Mapping[str, Matrix], numeric: Mapping[str, Matrix],
                   floor: float = 1e-3) -> float:
    """
    Worst relative gap between two gradient maps.

    Each leaf's max absolute difference is divided by the larger of the two
    max magnitudes (at least `floor`), so near-zero gradients are compared in
    absolute terms.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), floor)
        worst = max(worst, float(np.max(np.abs(a - n), initial=0.0)) / scale)
    return worst
