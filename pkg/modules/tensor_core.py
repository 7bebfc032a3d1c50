# modules/tensor_core.py

"""
Tensor Core Module

Dense float64 tensors with a reverse-mode automatic-differentiation tape.

Every op that touches a tensor requiring gradients records its backward rule on
the innermost open tape of the calling thread. With no tape open nothing is
recorded. Tapes are thread-local, so independent forward passes (different
batch shards) can run concurrently on separate threads.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.errors import ContractError, DimensionError, TensorIndexError

LOG = logging.getLogger(__name__)

# One tape stack and one grad-mode flag per thread
_thread_local = threading.local()


# ==============================================================================
# TAPE
# ==============================================================================

class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward", "needs")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor",
                 backward: Callable, needs: Tuple[bool, ...]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.needs = needs


class Tape:
    """
    Ordered record of differentiable ops.

    Nodes are appended as ops execute, so every node's inputs precede it.
    Use as a context manager to open a fresh tape for one forward/backward pass;
    leaving the context clears it.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.leaves: Dict[int, "Tensor"] = {}

    def record(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor",
               backward: Callable, needs: Tuple[bool, ...]) -> None:
        output._tape = self
        output._node = len(self.nodes)
        self.nodes.append(TapeNode(op, inputs, output, backward, needs))
        for tensor in inputs:
            if tensor._is_leaf and tensor.requires_grad:
                self.leaves[id(tensor)] = tensor

    def backward(self, loss: "Tensor") -> None:
        """Visit every node at or before `loss` exactly once, in reverse order."""
        if loss._tape is not self or loss._node is None:
            raise ContractError("loss was not recorded on this tape")

        pending: Dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}

        for index in range(loss._node, -1, -1):
            grad = pending.pop(index, None)
            if grad is None:
                continue
            node = self.nodes[index]
            input_grads = node.backward(grad, node.needs)
            for tensor, need, g in zip(node.inputs, node.needs, input_grads):
                if not need or g is None:
                    continue
                if tensor._is_leaf:
                    tensor._accumulate(g)
                elif tensor._tape is self and tensor._node is not None:
                    previous = pending.get(tensor._node)
                    pending[tensor._node] = g if previous is None else previous + g

        for leaf in self.leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._tape = None
            node.output._node = None
        self.nodes = []
        self.leaves = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.clear()


def _tape_stack() -> List[Tape]:
    if not hasattr(_thread_local, "tapes"):
        _thread_local.tapes = []
    return _thread_local.tapes


def current_tape() -> Optional[Tape]:
    """Innermost open tape of this thread; None outside every `with Tape()` block."""
    stack = _tape_stack()
    return stack[-1] if stack else None


def is_grad_enabled() -> bool:
    return getattr(_thread_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them (inference, MD, optimizer updates)."""
    previous = is_grad_enabled()
    _thread_local.grad_enabled = False
    try:
        yield
    finally:
        _thread_local.grad_enabled = previous


# ==============================================================================
# TENSOR
# ==============================================================================

class Tensor:
    """Dense float64 array that may take part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None
        self._node: Optional[int] = None
        self._is_leaf = True

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = np.asarray(array, dtype=np.float64)
        tensor.requires_grad = False
        tensor.grad = None
        tensor.name = None
        tensor._tape = None
        tensor._node = None
        tensor._is_leaf = True
        return tensor

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"<Tensor shape={self.shape} requires_grad={self.requires_grad}{label}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    @property
    def tape_id(self) -> Optional[int]:
        return self._node

    def _tracks(self) -> bool:
        if self._is_leaf:
            return self.requires_grad
        return self._node is not None

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    # Operator sugar -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_reduce(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean_reduce(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


def constant(value) -> Tensor:
    """A tensor that never requires gradients."""
    return Tensor._wrap(np.array(value, dtype=np.float64))


def parameter(value, name: Optional[str] = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=np.float64))


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=np.float64))


def _emit(op: str, out: np.ndarray, inputs: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    result = Tensor._wrap(out)
    if not is_grad_enabled():
        return result

    needs = tuple(t._tracks() for t in inputs)
    if not any(needs):
        return result

    tape = current_tape()
    if tape is None:
        return result
    for tensor, need in zip(inputs, needs):
        if need and not tensor._is_leaf and tensor._tape is not tape:
            raise ContractError(f"{op}: input was recorded on a different tape")

    result._is_leaf = False
    result.requires_grad = True
    tape.record(op, inputs, result, backward, needs)
    return result


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every requires_grad leaf on the tape."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    if loss._is_leaf:
        if not loss.requires_grad:
            raise ContractError("backward called on a tensor that is not on a tape")
        loss._accumulate(np.ones_like(loss.data))
        return

    if loss._tape is None or loss._node is None:
        raise ContractError("loss tape was already cleared")
    loss._tape.backward(loss)


# ==============================================================================
# BROADCAST RULES
# ==============================================================================

def _check_broadcast(op: str, shape_a: Tuple[int, ...], shape_b: Tuple[int, ...]) -> None:
    # Equal shapes, scalar, leading-batch suffix match, or equal-rank singleton expansion.
    if shape_a == shape_b or shape_a == () or shape_b == ():
        return
    if len(shape_a) != len(shape_b):
        short, long = sorted((shape_a, shape_b), key=len)
        if long[len(long) - len(short):] == short:
            return
    elif all(x == y or x == 1 or y == 1 for x, y in zip(shape_a, shape_b)):
        return
    raise DimensionError(f"{op}: shapes {list(shape_a)} and {list(shape_b)} are not broadcast-compatible")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ==============================================================================
# BINARY OPS
# ==============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)

    def _backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _emit("add", a.data + b.data, (a, b), _backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)

    def _backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _emit("sub", a.data - b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)

    def _backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _emit("mul", a.data * b.data, (a, b), _backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.shape, b.shape)

    def _backward(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if needs[1] else None)

    return _emit("div", a.data / b.data, (a, b), _backward)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", -x.data, (x,), lambda g, needs: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")

    def _backward(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return _emit("matmul", a.data @ b.data, (a, b), _backward)


# ==============================================================================
# UNARY OPS
# ==============================================================================

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _emit("sigmoid", s, (x,), lambda g, needs: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    """SiLU(x) = x * sigmoid(x)."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _emit("silu", x.data * s, (x,), lambda g, needs: (g * (s + x.data * s * (1.0 - s)),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _emit("exp", e, (x,), lambda g, needs: (g * e,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    r = np.sqrt(x.data)
    return _emit("sqrt", r, (x,), lambda g, needs: (g * 0.5 / r,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _emit("abs", np.abs(x.data), (x,), lambda g, needs: (g * np.sign(x.data),))


# ==============================================================================
# REDUCTIONS
# ==============================================================================

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def sum_reduce(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _emit("sum_reduce", out, (x,),
                 lambda g, needs: (_expand_reduced(g, x.shape, axis, keepdims),))


def mean_reduce(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size / max(out.size, 1)
    return _emit("mean_reduce", out, (x,),
                 lambda g, needs: (_expand_reduced(g, x.shape, axis, keepdims) / count,))


def max_reduce(x, axis: int = 0, index: Optional[np.ndarray] = None,
               num_segments: Optional[int] = None) -> Tensor:
    """
    Max along `axis`, or per segment of rows when `index` is given.

    The gradient flows to the first row attaining the maximum.
    """
    if index is not None:
        return segment_max(x, index, num_segments)

    x = as_tensor(x)
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def _backward(g, needs):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit("max_reduce", out, (x,), _backward)


def _check_index(op: str, index: np.ndarray, bound: int) -> np.ndarray:
    index = np.asarray(index)
    if index.size and not np.issubdtype(index.dtype, np.integer):
        raise TensorIndexError(f"{op}: index must be integer, got {index.dtype}")
    index = index.astype(np.int64, copy=False)
    if index.size and (index.min() < 0 or index.max() >= bound):
        raise TensorIndexError(f"{op}: index range [{index.min()}, {index.max()}] outside [0, {bound})")
    return index


def segment_max(x, index, num_segments: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"segment_max expects [rows, cols], got {list(x.shape)}")
    index = _check_index("segment_max", index, num_segments)
    counts = np.bincount(index, minlength=num_segments)
    if np.any(counts == 0):
        raise ContractError(f"segment_max: segment {int(np.argmin(counts))} is empty")

    out = np.full((num_segments, x.shape[1]), -np.inf)
    np.maximum.at(out, index, x.data)

    rows = np.arange(x.shape[0])[:, None]
    hit = x.data == out[index]
    first = np.full(out.shape, x.shape[0], dtype=np.int64)
    np.minimum.at(first, index, np.where(hit, rows, x.shape[0]))
    winner = rows == first[index]

    def _backward(g, needs):
        return (np.where(winner, g[index], 0.0),)

    return _emit("segment_max", out, (x,), _backward)


# ==============================================================================
# INDEXING AND LAYOUT
# ==============================================================================

def scatter_add(x, index, num_segments: int) -> Tensor:
    """Sum rows of `x` into `num_segments` slots: out[index[r]] += x[r]."""
    x = as_tensor(x)
    index = _check_index("scatter_add", index, num_segments)
    if index.shape[0] != x.shape[0]:
        raise DimensionError(f"scatter_add: {index.shape[0]} indices for {x.shape[0]} rows")
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, index, x.data)
    return _emit("scatter_add", out, (x,), lambda g, needs: (g[index],))


def index_select(x, index) -> Tensor:
    """Gather rows: out[r] = x[index[r]]."""
    x = as_tensor(x)
    index = _check_index("index_select", index, x.shape[0])

    def _backward(g, needs):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _emit("index_select", x.data[index], (x,), _backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[list(t.shape) for t in tensors]} along axis {axis}: {e}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tensors, _backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")
    return _emit("reshape", out, (x,), lambda g, needs: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {list(x.shape)}")
    return _emit("transpose", x.data.T.copy(), (x,), lambda g, needs: (g.T,))


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.array(x.data[key])
    except IndexError as e:
        raise TensorIndexError(f"getitem on {list(x.shape)}: {e}")

    def _backward(g, needs):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit("getitem", out, (x,), _backward)


# ==============================================================================
# EINSUM
# ==============================================================================

def _parse_einsum(subscripts: str, count: int) -> Tuple[List[str], str]:
    if "->" not in subscripts or "." in subscripts:
        raise ContractError(f"einsum needs explicit output and no ellipsis: '{subscripts}'")
    lhs, out = subscripts.replace(" ", "").split("->")
    inputs = lhs.split(",")
    if len(inputs) != count:
        raise ContractError(f"einsum '{subscripts}' expects {len(inputs)} operands, got {count}")
    for sub_ in inputs + [out]:
        if len(set(sub_)) != len(sub_):
            raise ContractError(f"einsum: repeated index within '{sub_}' is not supported")
    return inputs, out


def _einsum_grad(inputs: List[str], out: str, k: int, g: np.ndarray, datas: List[np.ndarray]) -> np.ndarray:
    target = inputs[k]
    others = [(s, d) for i, (s, d) in enumerate(zip(inputs, datas)) if i != k]
    available = set(out).union(*[set(s) for s, _ in others])
    kept = "".join(c for c in target if c in available)
    expr = ",".join([out] + [s for s, _ in others]) + "->" + kept
    grad = np.einsum(expr, g, *[d for _, d in others], optimize=True)
    if kept == target:
        return grad
    # Indices private to this operand were summed out; their gradient is constant along them.
    shape = [datas[k].shape[i] if c in kept else 1 for i, c in enumerate(target)]
    return np.broadcast_to(grad.reshape(shape), datas[k].shape).copy()


def einsum(subscripts: str, *operands) -> Tensor:
    tensors = tuple(as_tensor(t) for t in operands)
    inputs, out = _parse_einsum(subscripts, len(tensors))
    datas = [t.data for t in tensors]
    try:
        result = np.einsum(subscripts, *datas, optimize=True)
    except ValueError as e:
        raise DimensionError(f"einsum '{subscripts}' on {[list(d.shape) for d in datas]}: {e}")

    def _backward(g, needs):
        return tuple(_einsum_grad(inputs, out, k, g, datas) if need else None
                     for k, need in enumerate(needs))

    return _emit("einsum", np.asarray(result, dtype=np.float64), tensors, _backward)


# ==============================================================================
# OP DISPATCH
# ==============================================================================

ELEMENTWISE_OPS: Dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "silu": silu,
    "sigmoid": sigmoid,
    "exp": exp,
    "sqrt": sqrt,
    "abs": absolute,
    "max_reduce": max_reduce,
    "sum_reduce": sum_reduce,
    "mean_reduce": mean_reduce,
    "concat": concat,
    "scatter_add": scatter_add,
    "index_select": index_select,
    "segment_max": segment_max,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch a named op, e.g. elementwise('silu', x) or elementwise('scatter_add', x, idx, n)."""
    fn = ELEMENTWISE_OPS.get(op)
    if fn is None:
        raise ContractError(f"unknown op '{op}'; known: {sorted(ELEMENTWISE_OPS)}")
    return fn(*args, **kwargs)
