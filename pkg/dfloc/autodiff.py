#!/usr/bin/env python3
"""
Autodiff - define-by-run, tape-based reverse-mode differentiation over numpy arrays

Every forward op appends one node to the tape it was recorded on; the tape is
rebuilt for each forward pass. All values are float64.

Broadcast rule for binary elementwise ops: operands either have identical
shapes, or one is a matrix [m x n] and the other a vector [n] (trailing
dimension). Python/numpy scalars are lifted to constants of the other
operand's shape. Anything else raises ShapeError.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DomainError, NumericFault, ShapeError

logger = logging.getLogger(__name__)

Operand = Union['Tensor', float, int, np.ndarray]


class _Node:
    __slots__ = ('op', 'parents', 'value', 'vjp', 'name', 'is_leaf')

    def __init__(self, op: str, parents: Tuple[int, ...], value: np.ndarray,
                 vjp: Optional[Callable], name: Optional[str], is_leaf: bool):
        self.op = op
        self.parents = parents
        self.value = value
        self.vjp = vjp
        self.name = name
        self.is_leaf = is_leaf


class Tensor:
    """
    Handle to one node on a tape.

    Tensors are cheap views; the value and gradient live on the tape.
    """

    __slots__ = ('tape', 'index')

    def __init__(self, tape: 'Tape', index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def name(self) -> Optional[str]:
        return self.tape.nodes[self.index].name

    @property
    def grad(self) -> np.ndarray:
        return self.tape.gradient(self)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        node = self.tape.nodes[self.index]
        return f"<Tensor #{self.index} op={node.op} shape={self.shape}>"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


class Tape:
    """
    Ordered record of forward ops.

    Parents always precede their children, so a single reverse sweep
    visits every node exactly once.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._grads: Optional[List[Optional[np.ndarray]]] = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: Optional[str] = None) -> Tensor:
        """Register a differentiable input (parameter or data)."""
        array = np.array(value, dtype=np.float64)
        _check_finite(array, 'leaf' if name is None else name)
        return self._append('leaf', (), array, None, name, True)

    def constant(self, value, name: Optional[str] = None) -> Tensor:
        """Register a non-differentiable input; its gradient is still reported."""
        array = np.array(value, dtype=np.float64)
        _check_finite(array, 'constant' if name is None else name)
        return self._append('const', (), array, None, name, True)

    def _append(self, op: str, parents: Tuple[int, ...], value: np.ndarray,
                vjp: Optional[Callable], name: Optional[str] = None,
                is_leaf: bool = False) -> Tensor:
        self.nodes.append(_Node(op, parents, value, vjp, name, is_leaf))
        self._grads = None
        return Tensor(self, len(self.nodes) - 1)

    def record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray,
               vjp: Callable) -> Tensor:
        _check_finite(value, op)
        return self._append(op, tuple(t.index for t in inputs), value, vjp)

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """
        Reverse sweep from a scalar loss.

        Args:
            loss: scalar tensor recorded on this tape

        Returns:
            Dict of gradients for every named leaf
        """
        if loss.tape is not self:
            raise ContractError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)

        for index in range(loss.index, -1, -1):
            node = self.nodes[index]
            upstream = grads[index]
            if upstream is None or node.vjp is None:
                continue
            parent_grads = node.vjp(upstream)
            for parent, g in zip(node.parents, parent_grads):
                if g is None:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericFault(f"non-finite gradient flowing out of '{node.op}'",
                                       layer=f"{node.op}#{index}")
                if grads[parent] is None:
                    grads[parent] = np.array(g, dtype=np.float64)
                else:
                    grads[parent] = grads[parent] + g

        self._grads = grads
        return {node.name: self.gradient(Tensor(self, i))
                for i, node in enumerate(self.nodes)
                if node.is_leaf and node.name is not None}

    def gradient(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward pass w.r.t. tensor (zeros if disconnected)."""
        if self._grads is None:
            raise ContractError("no backward pass has been run on this tape")
        g = self._grads[tensor.index]
        if g is None:
            return np.zeros_like(self.nodes[tensor.index].value)
        return g


def backward(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    """Run the reverse sweep of tape from loss; see Tape.backward."""
    return tape.backward(loss)


def _check_finite(array: np.ndarray, where: str):
    if not np.all(np.isfinite(array)):
        raise NumericFault(f"non-finite value produced by '{where}'", layer=where)


def _tape_of(*operands) -> Tape:
    for operand in operands:
        if isinstance(operand, Tensor):
            return operand.tape
    raise ContractError("at least one operand must be a Tensor")


def _lift(operand: Operand, tape: Tape, shape: Tuple[int, ...]) -> Tensor:
    if isinstance(operand, Tensor):
        if operand.tape is not tape:
            raise ContractError("operands were recorded on different tapes")
        return operand
    array = np.asarray(operand, dtype=np.float64)
    if array.ndim == 0:
        array = np.full(shape, float(array))
    return tape.constant(array)


def _binary_operands(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    tape = _tape_of(a, b)
    shape = a.shape if isinstance(a, Tensor) else b.shape
    ta = _lift(a, tape, shape)
    tb = _lift(b, tape, shape)
    if ta.shape == tb.shape:
        return ta, tb
    if len(ta.shape) == 2 and len(tb.shape) == 1 and ta.shape[1] == tb.shape[0]:
        return ta, tb
    if len(tb.shape) == 2 and len(ta.shape) == 1 and tb.shape[1] == ta.shape[0]:
        return ta, tb
    raise ShapeError(f"shapes {ta.shape} and {tb.shape} do not follow the trailing-vector broadcast rule")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # vector operand broadcast over rows
    return grad.sum(axis=0)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m x k] @ [k x n] -> [m x n]"""
    tape = _tape_of(a, b)
    a = _lift(a, tape, ())
    b = _lift(b, tape, ())
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m x k] @ [k x n], got {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return tape.record('matmul', (a, b), av @ bv, vjp)


def transpose(x: Tensor) -> Tensor:
    if len(x.shape) != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")
    return x.tape.record('transpose', (x,), x.value.T.copy(), lambda g: (g.T,))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting the row max."""
    if len(x.shape) != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got {x.shape}")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return x.tape.record('softmax_rows', (x,), y, vjp)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = _binary_operands(a, b)
    sa, sb = ta.shape, tb.shape
    return ta.tape.record('add', (ta, tb), ta.value + tb.value,
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = _binary_operands(a, b)
    sa, sb = ta.shape, tb.shape
    return ta.tape.record('sub', (ta, tb), ta.value - tb.value,
                          lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = _binary_operands(a, b)
    av, bv = ta.value, tb.value
    return ta.tape.record('mul', (ta, tb), av * bv,
                          lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a: Operand, b: Operand) -> Tensor:
    ta, tb = _binary_operands(a, b)
    av, bv = ta.value, tb.value
    if np.any(bv == 0.0):
        raise DomainError("division by zero")
    y = av / bv
    return ta.tape.record('div', (ta, tb), y,
                          lambda g: (_unbroadcast(g / bv, av.shape),
                                     _unbroadcast(-g * y / bv, bv.shape)))


def neg(x: Tensor) -> Tensor:
    return x.tape.record('neg', (x,), -x.value, lambda g: (-g,))


def square(x: Tensor) -> Tensor:
    v = x.value
    return x.tape.record('square', (x,), v * v, lambda g: (2.0 * v * g,))


def relu(x: Tensor) -> Tensor:
    v = x.value
    mask = (v > 0.0).astype(np.float64)
    return x.tape.record('relu', (x,), v * mask, lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return x.tape.record('tanh', (x,), y, lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    return x.tape.record('exp', (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    v = x.value
    if np.any(v <= 0.0):
        raise DomainError("log of a non-positive value")
    return x.tape.record('log', (x,), np.log(v), lambda g: (g / v,))


def sqrt(x: Tensor) -> Tensor:
    v = x.value
    if np.any(v <= 0.0):
        raise DomainError("sqrt of a non-positive value")
    y = np.sqrt(v)
    return x.tape.record('sqrt', (x,), y, lambda g: (g * 0.5 / y,))


def softplus(x: Tensor) -> Tensor:
    v = x.value
    y = np.logaddexp(0.0, v)
    sigmoid = 0.5 * (1.0 + np.tanh(0.5 * v))
    return x.tape.record('softplus', (x,), y, lambda g: (g * sigmoid,))


def acos(x: Tensor) -> Tensor:
    v = x.value
    if np.any(np.abs(v) >= 1.0):
        raise DomainError("acos argument must lie strictly inside (-1, 1)")
    slope = -1.0 / np.sqrt(1.0 - v * v)
    return x.tape.record('acos', (x,), np.arccos(v), lambda g: (g * slope,))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient passes only where the input is inside."""
    v = x.value
    mask = ((v >= low) & (v <= high)).astype(np.float64)
    return x.tape.record('clip', (x,), np.clip(v, low, high), lambda g: (g * mask,))


_ELEMENTWISE = {
    'add': add,
    'sub': sub,
    'mul': mul,
    'div': div,
    'neg': neg,
    'square': square,
    'relu': relu,
    'tanh': tanh,
    'exp': exp,
    'log': log,
    'sqrt': sqrt,
    'softplus': softplus,
    'acos': acos,
}


def elementwise(name: str, *args: Operand) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        op = _ELEMENTWISE[name]
    except KeyError:
        raise ContractError(f"unknown elementwise op '{name}'") from None
    return op(*args)


# ---------------------------------------------------------------------------
# Structural
# ---------------------------------------------------------------------------

def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    """Concatenate two tensors; backward splits at the boundary."""
    ndim = len(a.shape)
    if ndim != len(b.shape):
        raise ShapeError(f"concat needs equal ranks, got {a.shape} and {b.shape}")
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    axis = axis % ndim
    for dim in range(ndim):
        if dim != axis and a.shape[dim] != b.shape[dim]:
            raise ShapeError(f"concat dims disagree off-axis: {a.shape} vs {b.shape}")
    cut = a.shape[axis]

    def vjp(g):
        return tuple(np.split(g, [cut], axis=axis))

    return a.tape.record('concat', (a, b), np.concatenate([a.value, b.value], axis=axis), vjp)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack k vectors of length n into a [k x n] matrix."""
    if not rows:
        raise ShapeError("stack_rows needs at least one row")
    width = rows[0].shape
    if len(width) != 1 or any(r.shape != width for r in rows):
        raise ShapeError("stack_rows needs vectors of identical length")
    tape = rows[0].tape
    k = len(rows)
    return tape.record('stack_rows', tuple(rows), np.stack([r.value for r in rows]),
                       lambda g: tuple(g[i] for i in range(k)))


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice x[:, start:stop] of a matrix."""
    if len(x.shape) != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"bad column slice [{start}:{stop}] of {x.shape}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return x.tape.record('columns', (x,), x.value[:, start:stop].copy(), vjp)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    try:
        y = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return x.tape.record('reshape', (x,), y.copy(), lambda g: (g.reshape(original),))


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row, [m x n] -> [m x 1]; zero rows get a zero subgradient."""
    if len(x.shape) != 2:
        raise ShapeError(f"row_norm needs a matrix, got {x.shape}")
    v = x.value
    n = np.sqrt((v * v).sum(axis=1, keepdims=True))
    safe = np.where(n > 0.0, n, 1.0)

    def vjp(g):
        return (g * np.where(n > 0.0, v / safe, 0.0),)

    return x.tape.record('row_norm', (x,), n, vjp)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def mean_pool(x: Tensor) -> Tensor:
    """Mean over the token axis, [n x d] -> [d]."""
    if len(x.shape) != 2:
        raise ShapeError(f"mean_pool needs [n x d], got {x.shape}")
    n = x.shape[0]
    if n < 1:
        raise ShapeError("mean_pool over an empty token axis")
    return x.tape.record('mean_pool', (x,), x.value.mean(axis=0),
                         lambda g: (np.broadcast_to(g / n, (n,) + g.shape).copy(),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return x.tape.record('sum_all', (x,), np.array(x.value.sum()),
                         lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    size = x.value.size
    return x.tape.record('mean_all', (x,), np.array(x.value.mean()),
                         lambda g: (np.full(shape, float(g) / size),))


def main():
    """Demo: d(x^2)/dx at x = 3"""
    tape = Tape()
    x = tape.leaf(3.0, name='x')
    loss = mul(x, x)
    grads = tape.backward(loss)
    print(f"loss = {float(loss.value):.1f}, dloss/dx = {float(grads['x']):.1f}")


if __name__ == "__main__":
    main()
