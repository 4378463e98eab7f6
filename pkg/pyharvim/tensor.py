"""
Dense tensors with a reverse-mode tape.

Backward rules are written with Tensor operations, so a backward pass run with
create_graph=True is itself recorded and can be differentiated a second time.
"""
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DetachedTapeException, DomainException, NonFiniteException, ShapeMismatchException

_LOGGER = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}

_precision = threading.local()
_grad_mode = threading.local()


def get_default_dtype():
    """ Scalar type for new tensors on the calling thread, float32 unless switched """
    return getattr(_precision, "dtype", np.float32)


def set_precision(name: str):
    """ Switch the scalar type used for new tensors, "float32" (default) or "float64" """
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(PRECISIONS)}")
    _precision.dtype = PRECISIONS[name]


@contextmanager
def precision(name: str):
    previous = get_default_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _precision.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def _grad_enabled(enabled: bool):
    previous = is_grad_enabled()
    _grad_mode.enabled = enabled
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def no_grad():
    return _grad_enabled(False)


def enable_grad():
    return _grad_enabled(True)


@dataclass
class TapeNode:
    op: str
    parents: Tuple["Tensor", ...]
    # closes over the forward values the rule needs
    vjp: Optional[Callable[["Tensor"], Tuple[Optional["Tensor"], ...]]]
    released: bool = False

    def release(self):
        self.parents = ()
        self.vjp = None
        self.released = True


class Tensor:
    # lets ndarray <op> Tensor dispatch to the reflected Tensor operator
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=dtype or get_default_dtype())
        if not np.all(np.isfinite(array)):
            raise NonFiniteException(f"tensor {name or ''} created from non-finite data")
        array.flags.writeable = False
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self.name = name
        self._node: Optional[TapeNode] = None

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchException(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return _constant(self.data)

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        name = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{name})"

    def __len__(self):
        return self.shape[0]

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def abs(self) -> "Tensor":
        return tabs(self)

    def relu(self) -> "Tensor":
        return relu(self)


def _constant(data) -> Tensor:
    out = Tensor.__new__(Tensor)
    array = np.asarray(data)
    if array.flags.writeable:
        array = array.copy()
        array.flags.writeable = False
    out.data = array
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._node = None
    return out


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(data, op: str, parents: Sequence[Tensor], vjp) -> Tensor:
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        _LOGGER.error("Operation %s produced non-finite values", op)
        raise NonFiniteException(f"{op} produced a non-finite value")
    # op results are fresh arrays, freeze them in place
    data.flags.writeable = False
    out = _constant(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = TapeNode(op, tuple(parents), vjp)
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchException(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def sum_to(t: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """ Reduce a broadcast result back to shape """
    shape = tuple(shape)
    if t.shape == shape:
        return t
    lead = t.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, size in enumerate(shape) if size == 1 and t.shape[i + lead] != 1
    )
    data = t.data.sum(axis=axes, keepdims=True).reshape(shape)
    return _record(data, "sum_to", (t,), lambda g: (broadcast_to(g, t.shape),))


def broadcast_to(t: Tensor, shape: Tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if t.shape == shape:
        return t
    data = np.broadcast_to(t.data, shape).copy()
    return _record(data, "broadcast_to", (t,), lambda g: (sum_to(g, t.shape),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        )

    return _record(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(neg(g), b.shape) if b.requires_grad else None,
        )

    return _record(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        return (
            sum_to(g * b, a.shape) if a.requires_grad else None,
            sum_to(g * a, b.shape) if b.requires_grad else None,
        )

    return _record(a.data * b.data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainException("div: division by zero")

    def vjp(g):
        return (
            sum_to(g / b, a.shape) if a.requires_grad else None,
            sum_to(neg(g) * a / (b * b), b.shape) if b.requires_grad else None,
        )

    return _record(a.data / b.data, "div", (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, "neg", (a,), lambda g: (neg(g),))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power takes a scalar exponent")
    exponent = float(exponent)
    if not exponent.is_integer() and np.any(a.data < 0):
        raise DomainException(f"power: negative base with fractional exponent {exponent}")
    if exponent < 0 and np.any(a.data == 0):
        raise DomainException(f"power: zero base with negative exponent {exponent}")

    def vjp(g):
        if exponent == 1.0:
            return (g,)
        return (g * exponent * power(a, exponent - 1.0),)

    return _record(np.power(a.data, exponent), "power", (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def vjp(g):
        return (g * out,)

    with np.errstate(over="ignore"):
        out = _record(np.exp(a.data), "exp", (a,), vjp)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainException("log: argument must be positive")
    return _record(np.log(a.data), "log", (a,), lambda g: (g / a,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def vjp(g):
        return (g * (1.0 - out * out),)

    out = _record(np.tanh(a.data), "tanh", (a,), vjp)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def vjp(g):
        return (g * out * (1.0 - out),)

    out = _record(_stable_sigmoid(a.data), "sigmoid", (a,), vjp)
    return out


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record(np.abs(a.data), "abs", (a,), lambda g: (g * _constant(sign),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    gate = (a.data > 0).astype(a.dtype)
    return _record(a.data * gate, "relu", (a,), lambda g: (g * _constant(gate),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchException(f"matmul needs two matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchException(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def vjp(g):
        return (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        )

    return _record(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchException(f"transpose needs a matrix, got shape {a.shape}")
    return _record(a.data.T.copy(), "transpose", (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchException(f"cannot reshape {a.shape} into {shape}")
    return _record(data.copy(), "reshape", (a,), lambda g: (reshape(g, a.shape),))


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else size for i, size in enumerate(a.shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


class GradientMap(dict):
    """ Leaf tensor -> accumulated adjoint, keyed by tensor identity """


def _topological_order(root: Tensor) -> List[Tensor]:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        node = tensor._node
        if node is None:
            continue
        if node.released:
            raise DetachedTapeException(f"tape behind {node.op} was already consumed by a backward pass")
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _relevant_ids(order: List[Tensor], targets: Sequence[Tensor]) -> set:
    """ Ids of tensors that are a target or have a target among their ancestors """
    relevant = {id(t) for t in targets}
    for tensor in order:
        node = tensor._node
        if node is not None and any(id(p) in relevant for p in node.parents):
            relevant.add(id(tensor))
    return relevant


def _run_backward(
    root: Tensor, create_graph: bool, retain_graph: bool, targets: Optional[Sequence[Tensor]] = None
) -> Tuple[List[Tensor], Dict[int, Tensor]]:
    order = _topological_order(root)
    relevant = _relevant_ids(order, targets) if targets is not None else None
    grads = {id(root): _constant(np.ones_like(root.data))}
    with _grad_enabled(create_graph):
        for tensor in reversed(order):
            node = tensor._node
            upstream = grads.get(id(tensor))
            if node is None or upstream is None:
                continue
            if relevant is not None and not any(id(p) in relevant for p in node.parents):
                continue
            for parent, contribution in zip(node.parents, node.vjp(upstream)):
                if contribution is None or not parent.requires_grad:
                    continue
                if relevant is not None and id(parent) not in relevant:
                    continue
                key = id(parent)
                grads[key] = contribution if key not in grads else grads[key] + contribution
    if not (retain_graph or create_graph):
        for tensor in order:
            if tensor._node is not None:
                tensor._node.release()
    return order, grads


def _check_scalar_root(root: Tensor):
    if root.size != 1:
        raise ShapeMismatchException(f"backward needs a scalar root, got shape {root.shape}")


def backward(root: Tensor, create_graph: bool = False, retain_graph: bool = False) -> GradientMap:
    """
    Accumulate d(root)/d(leaf) into leaf.grad for every reachable leaf that requires grad.

    The tape is released afterwards unless retain_graph or create_graph is set.
    """
    _check_scalar_root(root)
    result = GradientMap()
    if not root.requires_grad:
        return result
    order, grads = _run_backward(root, create_graph, retain_graph)
    for tensor in order:
        if tensor.is_leaf and id(tensor) in grads:
            contribution = grads[id(tensor)]
            if not create_graph:
                contribution = contribution.detach()
            tensor.grad = contribution if tensor.grad is None else tensor.grad + contribution
            result[tensor] = contribution
    return result


def grad(
    root: Tensor, inputs: Sequence[Tensor], create_graph: bool = False, retain_graph: bool = False
) -> List[Tensor]:
    """ Functional gradient of a scalar root w.r.t. inputs (leaf or not); .grad is left untouched """
    _check_scalar_root(root)
    if not root.requires_grad:
        return [_constant(np.zeros_like(t.data)) for t in inputs]
    _, grads = _run_backward(root, create_graph, retain_graph, targets=inputs)
    results = []
    for tensor in inputs:
        value = grads.get(id(tensor))
        if value is None:
            value = _constant(np.zeros_like(tensor.data))
        elif not create_graph:
            value = value.detach()
        results.append(value)
    return results


def finite_diff_grad(f: Callable[[Tensor], object], x, h: float = 1e-5) -> Tensor:
    """ Central differences (f(x + h e_i) - f(x - h e_i)) / 2h, evaluated in 64-bit """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    estimate = np.zeros_like(base)
    flat = base.reshape(-1)
    out = estimate.reshape(-1)

    def evaluate(point):
        with no_grad():
            value = f(Tensor(point, dtype=np.float64))
        value = float(value.item() if isinstance(value, Tensor) else value)
        if not math.isfinite(value):
            raise NonFiniteException("finite_diff_grad: objective is not finite at a sample point")
        return value

    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = evaluate(base.copy())
        flat[i] = original - h
        lower = evaluate(base.copy())
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * h)
    return Tensor(estimate, dtype=np.float64)


class SeededRng:
    """
    Counter-based generator (Philox 4x64) keyed by (seed, stream).

    Every stochastic call site receives one of these explicitly; there is no module-level
    generator. Independent jobs derive their own stream with spawn().
    """

    ALGORITHM = "philox4x64"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) % 2 ** 64
        self.stream = int(stream) % 2 ** 64
        self._generator = np.random.Generator(np.random.Philox(key=(self.stream << 64) | self.seed))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"

    @property
    def position(self) -> Tuple[int, ...]:
        state = self._generator.bit_generator.state["state"]
        return tuple(int(c) for c in state["counter"]) + (int(self._generator.bit_generator.state["buffer_pos"]),)

    def spawn(self, index: int) -> "SeededRng":
        return SeededRng(self.seed, (self.stream * 65537 + int(index) + 1) % 2 ** 64)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self._generator.standard_normal(shape) * scale).astype(get_default_dtype())

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        values = self._generator.uniform(low, high, shape)
        return values if shape is None else values.astype(get_default_dtype())

    def integers(self, low: int, high: int, shape=None):
        return self._generator.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)
