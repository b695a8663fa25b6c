"""Reverse-mode differentiation over an append-only tape.

Every operation appends a ``TapeNode`` whose inputs are earlier nodes, so
the tape is topologically ordered by construction and ``backward`` is a
single reverse sweep. Gradients are zero-initialized at the start of each
sweep and accumulated into every node that requires them.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from src.numerics.tensor import NORM_FLOOR, ContractError, DimensionError, as_tensor, check_finite


class OpKind(str, Enum):
    """Operations the tape knows how to differentiate."""

    LEAF = "leaf"
    CONST = "const"
    MATMUL = "matmul"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    SCALE = "scale"
    RELU = "relu"
    EXP = "exp"
    LOG = "log"
    SOFTMAX_ROWS = "softmax_rows"
    LOG_SOFTMAX_ROWS = "log_softmax_rows"
    ROW_NORM = "row_norm"
    MAXIMUM = "maximum"
    SUM = "sum"
    MEAN = "mean"
    ROW_SUM = "row_sum"
    ROW_DOT = "row_dot"
    TRANSPOSE = "transpose"
    DIAG = "diag"
    FLIP_GRAD = "flip_grad"


@dataclass
class TapeNode:
    """One recorded value and its gradient buffer."""

    op: OpKind
    inputs: Tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    grad: Optional[np.ndarray] = None
    aux: Any = None
    name: Optional[str] = None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Sum a gradient back down to a row/column-vector or scalar operand."""
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tuple[int, int], b: Tuple[int, int]) -> Tuple[int, int]:
    """Result shape of an elementwise op; one operand must already have it."""
    out = (max(a[0], b[0]), max(a[1], b[1]))
    for shape in (a, b):
        for axis in (0, 1):
            if shape[axis] not in (1, out[axis]):
                raise DimensionError(op, a, b)
    if a != out and b != out:
        raise DimensionError(op, a, b)
    return out


class Var:
    """Handle to a tape node, with arithmetic operators."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def node(self) -> TapeNode:
        return self.tape.nodes[self.index]

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.node.grad

    @property
    def shape(self) -> Tuple[int, int]:
        return self.node.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.node.requires_grad

    def item(self) -> float:
        """Python float of a 1 x 1 value."""
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.value[0, 0])

    @property
    def T(self) -> "Var":
        return self.tape.transpose(self)

    def __add__(self, other: "Operand") -> "Var":
        return self.tape.add(self, other)

    def __radd__(self, other: "Operand") -> "Var":
        return self.tape.add(other, self)

    def __sub__(self, other: "Operand") -> "Var":
        return self.tape.sub(self, other)

    def __rsub__(self, other: "Operand") -> "Var":
        return self.tape.sub(other, self)

    def __mul__(self, other: "Operand") -> "Var":
        if isinstance(other, (int, float)):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, other)

    def __rmul__(self, other: "Operand") -> "Var":
        return self.__mul__(other)

    def __truediv__(self, other: "Operand") -> "Var":
        if isinstance(other, (int, float)):
            return self.tape.scale(self, 1.0 / float(other))
        return self.tape.div(self, other)

    def __neg__(self) -> "Var":
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other: "Operand") -> "Var":
        return self.tape.matmul(self, other)

    def __repr__(self) -> str:
        return f"<Var(#{self.index}, op={self.node.op.value}, shape={self.shape})>"


Operand = Union[Var, np.ndarray, float, int]


class Tape:
    """Append-only record of operations for reverse-mode differentiation."""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    # ===== Recording =====

    def _record(self, op: OpKind, inputs: Tuple[int, ...], value: np.ndarray, aux: Any = None,
                name: Optional[str] = None) -> Var:
        check_finite(op.value, value)
        value = np.ascontiguousarray(value, dtype=np.float64)
        value.flags.writeable = False
        requires_grad = op == OpKind.LEAF or any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(TapeNode(op=op, inputs=inputs, value=value, requires_grad=requires_grad,
                                   aux=aux, name=name))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value: Any, name: Optional[str] = None) -> Var:
        """A differentiable input (parameter)."""
        return self._record(OpKind.LEAF, (), as_tensor(value).copy(), name=name)

    def constant(self, value: Any, name: Optional[str] = None) -> Var:
        """A non-differentiable input."""
        return self._record(OpKind.CONST, (), as_tensor(value).copy(), name=name)

    def lift(self, value: Operand) -> Var:
        """Wrap raw data as a constant; Vars must belong to this tape."""
        if isinstance(value, Var):
            if value.tape is not self:
                raise ContractError("operands recorded on different tapes")
            return value
        return self.constant(value)

    # ===== Primitive operations =====

    def matmul(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        if a.shape[1] != b.shape[0]:
            raise DimensionError("matmul", a.shape, b.shape)
        return self._record(OpKind.MATMUL, (a.index, b.index), a.value @ b.value)

    def add(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        _broadcast_shape("add", a.shape, b.shape)
        return self._record(OpKind.ADD, (a.index, b.index), a.value + b.value)

    def sub(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        _broadcast_shape("sub", a.shape, b.shape)
        return self._record(OpKind.SUB, (a.index, b.index), a.value - b.value)

    def mul(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        _broadcast_shape("mul", a.shape, b.shape)
        return self._record(OpKind.MUL, (a.index, b.index), a.value * b.value)

    def div(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        _broadcast_shape("div", a.shape, b.shape)
        return self._record(OpKind.DIV, (a.index, b.index), a.value / b.value)

    def scale(self, a: Operand, factor: float) -> Var:
        a = self.lift(a)
        return self._record(OpKind.SCALE, (a.index,), a.value * factor, aux=float(factor))

    def relu(self, a: Operand) -> Var:
        a = self.lift(a)
        return self._record(OpKind.RELU, (a.index,), np.maximum(a.value, 0.0))

    def exp(self, a: Operand) -> Var:
        a = self.lift(a)
        return self._record(OpKind.EXP, (a.index,), np.exp(a.value))

    def log(self, a: Operand) -> Var:
        a = self.lift(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            value = np.log(a.value)
        return self._record(OpKind.LOG, (a.index,), value)

    def softmax_rows(self, a: Operand) -> Var:
        a = self.lift(a)
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise DimensionError("softmax_rows", a.shape)
        shifted = a.value - a.value.max(axis=1, keepdims=True)
        exps = np.exp(shifted)
        return self._record(OpKind.SOFTMAX_ROWS, (a.index,), exps / exps.sum(axis=1, keepdims=True))

    def log_softmax_rows(self, a: Operand) -> Var:
        a = self.lift(a)
        shifted = a.value - a.value.max(axis=1, keepdims=True)
        value = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return self._record(OpKind.LOG_SOFTMAX_ROWS, (a.index,), value)

    def row_norm(self, a: Operand) -> Var:
        """Per-row L2 norm as an n x 1 column, floored at NORM_FLOOR."""
        a = self.lift(a)
        norms = np.linalg.norm(a.value, axis=1, keepdims=True)
        return self._record(OpKind.ROW_NORM, (a.index,), np.maximum(norms, NORM_FLOOR))

    def maximum(self, a: Operand, b: Operand) -> Var:
        """Elementwise max; on ties the gradient goes to the first argument."""
        a, b = self.lift(a), self.lift(b)
        if a.shape != b.shape:
            raise DimensionError("maximum", a.shape, b.shape)
        return self._record(OpKind.MAXIMUM, (a.index, b.index), np.maximum(a.value, b.value))

    def sum(self, a: Operand) -> Var:
        a = self.lift(a)
        return self._record(OpKind.SUM, (a.index,), np.array([[a.value.sum()]]))

    def mean(self, a: Operand) -> Var:
        a = self.lift(a)
        return self._record(OpKind.MEAN, (a.index,), np.array([[a.value.mean()]]))

    def row_sum(self, a: Operand) -> Var:
        a = self.lift(a)
        return self._record(OpKind.ROW_SUM, (a.index,), a.value.sum(axis=1, keepdims=True))

    def row_dot(self, a: Operand, b: Operand) -> Var:
        """Per-row dot products as an n x 1 column."""
        a, b = self.lift(a), self.lift(b)
        if a.shape != b.shape:
            raise DimensionError("row_dot", a.shape, b.shape)
        return self._record(OpKind.ROW_DOT, (a.index, b.index), np.einsum("ij,ij->i", a.value, b.value)[:, None])

    def transpose(self, a: Operand) -> Var:
        a = self.lift(a)
        return self._record(OpKind.TRANSPOSE, (a.index,), a.value.T)

    def diag(self, a: Operand) -> Var:
        """Diagonal of a square matrix as an n x 1 column."""
        a = self.lift(a)
        if a.shape[0] != a.shape[1]:
            raise DimensionError("diag", a.shape)
        return self._record(OpKind.DIAG, (a.index,), np.diag(a.value)[:, None])

    def flip_grad(self, a: Operand) -> Var:
        """Identity forward, negated gradient backward (fault injection only)."""
        a = self.lift(a)
        return self._record(OpKind.FLIP_GRAD, (a.index,), a.value)

    # ===== Differentiation =====

    def backward(self, root: Var) -> None:
        """Populate gradients of every node that feeds a scalar root."""
        if root.tape is not self:
            raise ContractError("root belongs to a different tape")
        if root.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) root, got shape {root.shape}")

        for node in self.nodes:
            node.grad = np.zeros_like(node.value) if node.requires_grad else None
        self.nodes[root.index].grad = np.ones((1, 1))

        for index in range(root.index, -1, -1):
            node = self.nodes[index]
            if not node.requires_grad or not node.inputs:
                continue
            inputs = [self.nodes[i] for i in node.inputs]
            for child, contribution in zip(inputs, _VJP[node.op](node, inputs)):
                if child.requires_grad and contribution is not None:
                    child.grad += _unbroadcast(contribution, child.value.shape)

    def gradients(self, leaves: List[Var]) -> List[np.ndarray]:
        """Copies of leaf gradients after ``backward``."""
        return [np.array(leaf.grad) for leaf in leaves]


def _vjp_matmul(node: TapeNode, inputs: List[TapeNode]):
    a, b = inputs
    return node.grad @ b.value.T, a.value.T @ node.grad


def _vjp_mul(node: TapeNode, inputs: List[TapeNode]):
    a, b = inputs
    return node.grad * b.value, node.grad * a.value


def _vjp_div(node: TapeNode, inputs: List[TapeNode]):
    a, b = inputs
    return node.grad / b.value, -node.grad * a.value / (b.value * b.value)


def _vjp_softmax(node: TapeNode, inputs: List[TapeNode]):
    s = node.value
    return (s * (node.grad - (node.grad * s).sum(axis=1, keepdims=True)),)


def _vjp_log_softmax(node: TapeNode, inputs: List[TapeNode]):
    probs = np.exp(node.value)
    return (node.grad - probs * node.grad.sum(axis=1, keepdims=True),)


def _vjp_row_norm(node: TapeNode, inputs: List[TapeNode]):
    (a,) = inputs
    unclamped = node.value > NORM_FLOOR
    return (np.where(unclamped, node.grad / node.value, 0.0) * a.value,)


def _vjp_maximum(node: TapeNode, inputs: List[TapeNode]):
    a, b = inputs
    first = a.value >= b.value
    return node.grad * first, node.grad * ~first


def _vjp_row_dot(node: TapeNode, inputs: List[TapeNode]):
    a, b = inputs
    return node.grad * b.value, node.grad * a.value


_VJP: Dict[OpKind, Callable[[TapeNode, List[TapeNode]], tuple]] = {
    OpKind.MATMUL: _vjp_matmul,
    OpKind.ADD: lambda node, inputs: (node.grad, node.grad),
    OpKind.SUB: lambda node, inputs: (node.grad, -node.grad),
    OpKind.MUL: _vjp_mul,
    OpKind.DIV: _vjp_div,
    OpKind.SCALE: lambda node, inputs: (node.grad * node.aux,),
    OpKind.RELU: lambda node, inputs: (node.grad * (inputs[0].value > 0),),
    OpKind.EXP: lambda node, inputs: (node.grad * node.value,),
    OpKind.LOG: lambda node, inputs: (node.grad / inputs[0].value,),
    OpKind.SOFTMAX_ROWS: _vjp_softmax,
    OpKind.LOG_SOFTMAX_ROWS: _vjp_log_softmax,
    OpKind.ROW_NORM: _vjp_row_norm,
    OpKind.MAXIMUM: _vjp_maximum,
    OpKind.SUM: lambda node, inputs: (np.full(inputs[0].value.shape, node.grad[0, 0]),),
    OpKind.MEAN: lambda node, inputs: (np.full(inputs[0].value.shape, node.grad[0, 0] / inputs[0].value.size),),
    OpKind.ROW_SUM: lambda node, inputs: (np.broadcast_to(node.grad, inputs[0].value.shape).copy(),),
    OpKind.ROW_DOT: _vjp_row_dot,
    OpKind.TRANSPOSE: lambda node, inputs: (node.grad.T,),
    OpKind.DIAG: lambda node, inputs: (np.diagflat(node.grad),),
    OpKind.FLIP_GRAD: lambda node, inputs: (-node.grad,),
}
