"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation in alignformer is a registered primitive.
Calling a primitive on tensors that require gradients records a node; nodes
carry a global sequence number, so insertion order is a topological order of
the compute graph and :func:`backward` replays it in reverse.
"""

import itertools
import logging
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5
LOG_EPS = 1e-7

_sequence = itertools.count()
_state = threading.local()


def _grad_enabled():
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A dense row-major array with an optional gradient.

    Args:
        data: Array-like values. Floating numpy arrays keep their dtype,
            anything else becomes ``float32`` unless ``dtype`` is given.
        requires_grad: Whether gradients flow into this tensor.
        dtype: Optional dtype override.
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is not None:
            arr = np.array(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype.kind == 'f':
            arr = data
        else:
            arr = np.array(data, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.node is None

    @property
    def T(self):
        return transpose2d(self)

    def numpy(self):
        """Return the underlying array (not a copy)."""
        return self.data

    def item(self):
        """Return the single value of a one-element tensor."""
        if self.data.size != 1:
            raise ShapeError(f'item() needs one element, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        """Zero-fill the gradient buffer."""
        self.grad = np.zeros_like(self.data)

    def detach(self):
        """Return a constant tensor sharing no graph with this one."""
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul_elementwise(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f'Tensor(shape={self.shape}, dtype={self.dtype}{flag})'


class Node:
    """One recorded primitive application."""

    __slots__ = ('inputs', 'primitive', 'seq')

    def __init__(self, primitive, inputs):
        self.seq = next(_sequence)
        self.primitive = primitive
        self.inputs = inputs


class Primitive:
    """Base class of differentiable primitives.

    Subclasses implement ``check`` (shape validation), ``forward`` on raw
    arrays and ``backward`` returning one gradient (or ``None``) per input.
    ``forward`` may cache whatever ``backward`` needs on ``self``.
    """

    name = ''
    arity = 1

    def check(self, *shapes):
        pass

    def forward(self, *arrays, **attrs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def mismatch(self, *shapes):
        joined = ' and '.join(str(tuple(s)) for s in shapes)
        return ShapeError(f'{self.name}: incompatible shapes {joined}')


PRIMITIVES = {}


def register(cls):
    PRIMITIVES[cls.name] = cls
    return cls


def apply_primitive(name, *inputs, **attrs):
    """Run primitive ``name`` on tensors and record it when needed.

    Args:
        name: Registered primitive id.
        *inputs: One or two input tensors.
        **attrs: Primitive attributes (scalar factors, epsilons, constants).

    Returns:
        Tensor: The output tensor.

    Raises:
        ValueError: If ``name`` is not a registered primitive.
        ShapeError: If the input shapes do not fit the primitive.
        NumericalError: If the forward pass produced NaN or Inf.
    """
    cls = PRIMITIVES.get(name)
    if cls is None:
        raise ValueError(f'unknown primitive {name!r}')
    if len(inputs) != cls.arity:
        raise ValueError(f'{name} takes {cls.arity} input(s), got {len(inputs)}')
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f'{name}: inputs must be Tensor, got {type(t).__name__}')
    prim = cls()
    prim.check(*(t.shape for t in inputs))
    out = prim.forward(*(t.data for t in inputs), **attrs)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f'{name} produced non-finite values')
    result = Tensor(out)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(prim, inputs)
    return result


def graph_nodes(root):
    """Return the tensors with recorded nodes reachable from ``root``.

    The list is in insertion order, which is topological: every node's inputs
    precede it.
    """
    seen = set()
    found = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        found.append(t)
        stack.extend(t.node.inputs)
    found.sort(key=lambda t: t.node.seq)
    return found


def backward(root):
    """Populate ``grad`` of every leaf reachable from a scalar ``root``.

    Leaves created with ``requires_grad`` start from a zero-filled gradient,
    so a leaf the root does not depend on reads zeros afterwards. Leaf
    gradients accumulate across calls; callers zero them at the start of each
    training step.
    """
    if root.size != 1:
        raise ShapeError(
            f'backward: root must have one element, got shape {root.shape}'
        )
    seed = np.ones_like(root.data)
    if root.node is None:
        _accumulate(root, seed)
        return
    grads = {id(root): seed}
    for t in reversed(graph_nodes(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = t.node.primitive.backward(g)
        for inp, ig in zip(t.node.inputs, in_grads, strict=True):
            if ig is None or not inp.requires_grad:
                continue
            if not np.all(np.isfinite(ig)):
                raise NumericalError(
                    f'{t.node.primitive.name} backward produced non-finite values'
                )
            if inp.node is None:
                _accumulate(inp, ig)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig


def _accumulate(t, g):
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _same_shape(prim, a, b):
    if tuple(a) != tuple(b):
        raise prim.mismatch(a, b)


def _require_2d(prim, *shapes):
    if any(len(s) != 2 for s in shapes):
        raise prim.mismatch(*shapes)


@register
class MatMul(Primitive):
    name = 'matmul'
    arity = 2

    def check(self, a, b):
        _require_2d(self, a, b)
        if a[1] != b[0]:
            raise self.mismatch(a, b)

    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


@register
class Add(Primitive):
    name = 'add'
    arity = 2

    def check(self, a, b):
        _same_shape(self, a, b)

    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


@register
class Sub(Primitive):
    name = 'sub'
    arity = 2

    def check(self, a, b):
        _same_shape(self, a, b)

    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


@register
class MulElementwise(Primitive):
    name = 'mul_elementwise'
    arity = 2

    def check(self, a, b):
        _same_shape(self, a, b)

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


@register
class ScalarMul(Primitive):
    name = 'scalar_mul'

    def forward(self, x, c=1.0):
        self.c = x.dtype.type(c)
        return x * self.c

    def backward(self, grad):
        return (grad * self.c,)


@register
class Relu(Primitive):
    name = 'relu'

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad):
        return (np.where(self.mask, grad, grad.dtype.type(0)),)


@register
class Sigmoid(Primitive):
    name = 'sigmoid'

    def forward(self, x):
        self.y = expit(x)
        return self.y

    def backward(self, grad):
        return (grad * self.y * (1 - self.y),)


@register
class Exp(Primitive):
    name = 'exp'

    def forward(self, x):
        self.y = np.exp(x)
        return self.y

    def backward(self, grad):
        return (grad * self.y,)


@register
class Neg(Primitive):
    name = 'neg'

    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


@register
class Abs(Primitive):
    name = 'abs'

    def forward(self, x):
        # sign(0) == 0 gives the zero subgradient at the kink
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        return (grad * self.sign,)


@register
class SoftmaxLastdim(Primitive):
    name = 'softmax_lastdim'

    def forward(self, x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        self.y = z / z.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, grad):
        inner = (grad * self.y).sum(axis=-1, keepdims=True)
        return (self.y * (grad - inner),)


@register
class LayerNormLastdim(Primitive):
    name = 'layernorm_lastdim'

    def forward(self, x, eps=LAYERNORM_EPS):
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        self.inv_std = 1 / np.sqrt(var + x.dtype.type(eps))
        self.y = centered * self.inv_std
        return self.y

    def backward(self, grad):
        g_mean = grad.mean(axis=-1, keepdims=True)
        gy_mean = (grad * self.y).mean(axis=-1, keepdims=True)
        return (self.inv_std * (grad - g_mean - self.y * gy_mean),)


@register
class ReduceSum(Primitive):
    name = 'reduce_sum'

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(dtype=x.dtype)).reshape(1)

    def backward(self, grad):
        return (np.full(self.shape, grad.reshape(-1)[0], dtype=grad.dtype),)


@register
class ReduceMean(Primitive):
    name = 'reduce_mean'

    def forward(self, x):
        self.shape = x.shape
        self.count = x.size
        return np.asarray(x.sum(dtype=x.dtype) / x.dtype.type(x.size)).reshape(1)

    def backward(self, grad):
        value = grad.reshape(-1)[0] / grad.dtype.type(self.count)
        return (np.full(self.shape, value, dtype=grad.dtype),)


@register
class ConcatLastdim(Primitive):
    name = 'concat_lastdim'
    arity = 2

    def check(self, a, b):
        if len(a) != len(b) or tuple(a[:-1]) != tuple(b[:-1]):
            raise self.mismatch(a, b)

    def forward(self, a, b):
        self.split = a.shape[-1]
        return np.concatenate([a, b], axis=-1)

    def backward(self, grad):
        return grad[..., : self.split], grad[..., self.split :]


@register
class Transpose2d(Primitive):
    name = 'transpose2d'

    def check(self, x):
        _require_2d(self, x)

    def forward(self, x):
        return np.ascontiguousarray(x.T)

    def backward(self, grad):
        return (np.ascontiguousarray(grad.T),)


class _RowBroadcast(Primitive):
    arity = 2

    def check(self, x, row):
        _require_2d(self, x)
        if len(row) not in (1, 2) or row[-1] != x[1] or int(np.prod(row)) != x[1]:
            raise self.mismatch(x, row)


@register
class BroadcastAddRow(_RowBroadcast):
    name = 'broadcast_add_row'

    def forward(self, x, row):
        self.row_shape = row.shape
        return x + row.reshape(1, -1)

    def backward(self, grad):
        return grad, grad.sum(axis=0).reshape(self.row_shape)


@register
class BroadcastMulRow(_RowBroadcast):
    name = 'broadcast_mul_row'

    def forward(self, x, row):
        self.x = x
        self.row = row.reshape(1, -1)
        self.row_shape = row.shape
        return x * self.row

    def backward(self, grad):
        return grad * self.row, (grad * self.x).sum(axis=0).reshape(self.row_shape)


@register
class Log(Primitive):
    name = 'log'

    def forward(self, x, eps=LOG_EPS):
        eps = x.dtype.type(eps)
        self.x = x
        self.mask = x > eps
        return np.log(np.maximum(x, eps))

    def backward(self, grad):
        safe = np.where(self.mask, self.x, self.x.dtype.type(1))
        return (np.where(self.mask, grad / safe, grad.dtype.type(0)),)


@register
class StraightThrough(Primitive):
    """Emit a constant forward value, pass gradients to the input unchanged."""

    name = 'straight_through'

    def forward(self, x, value=None):
        value = np.asarray(value, dtype=x.dtype)
        if value.shape != x.shape:
            raise self.mismatch(x.shape, value.shape)
        return value.copy()

    def backward(self, grad):
        return (grad,)


def matmul(a, b):
    return apply_primitive('matmul', a, b)


def add(a, b):
    return apply_primitive('add', a, b)


def sub(a, b):
    return apply_primitive('sub', a, b)


def mul_elementwise(a, b):
    return apply_primitive('mul_elementwise', a, b)


def scalar_mul(x, c):
    return apply_primitive('scalar_mul', x, c=c)


def relu(x):
    return apply_primitive('relu', x)


def sigmoid(x):
    return apply_primitive('sigmoid', x)


def exp(x):
    return apply_primitive('exp', x)


def neg(x):
    return apply_primitive('neg', x)


def absolute(x):
    return apply_primitive('abs', x)


def softmax_lastdim(x):
    return apply_primitive('softmax_lastdim', x)


def layernorm_lastdim(x, eps=LAYERNORM_EPS):
    return apply_primitive('layernorm_lastdim', x, eps=eps)


def reduce_sum(x):
    return apply_primitive('reduce_sum', x)


def reduce_mean(x):
    return apply_primitive('reduce_mean', x)


def concat_lastdim(a, b):
    return apply_primitive('concat_lastdim', a, b)


def transpose2d(x):
    return apply_primitive('transpose2d', x)


def broadcast_add_row(x, row):
    return apply_primitive('broadcast_add_row', x, row)


def broadcast_mul_row(x, row):
    return apply_primitive('broadcast_mul_row', x, row)


def log(x, eps=LOG_EPS):
    return apply_primitive('log', x, eps=eps)


def straight_through(soft, hard):
    return apply_primitive('straight_through', soft, value=hard)


def constant(values, dtype=np.float32):
    """Wrap ``values`` as a tensor that never receives gradients."""
    return Tensor(np.asarray(values, dtype=dtype), dtype=dtype)


def grad_check(fn, x, eps=1e-6, indices=None):
    """Compare analytic gradients with central differences.

    The check runs in double precision: ``x`` is upcast for its duration and
    restored afterwards.

    Args:
        fn: Deterministic function mapping ``x`` to a one-element tensor.
        x: Input tensor; it must require gradients.
        eps: Finite-difference step in ``(0, 1e-2]``.
        indices: Optional flat element indices to check (default: all).

    Returns:
        float: ``max |analytic - numeric| / max(1, |analytic|)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f'eps must be in (0, 1e-2], got {eps}')
    original = x.data
    previous_grad = x.grad
    x.data = np.ascontiguousarray(original, dtype=np.float64).copy()
    x.requires_grad = True
    try:
        x.grad = None
        backward(fn(x))
        analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
        flat = x.data.reshape(-1)
        picked = range(x.size) if indices is None else indices
        worst = 0.0
        for idx in picked:
            value = flat[idx]
            flat[idx] = value + eps
            plus = fn(x).item()
            flat[idx] = value - eps
            minus = fn(x).item()
            flat[idx] = value
            numeric = (plus - minus) / (2 * eps)
            err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
            worst = max(worst, err)
        return worst
    finally:
        x.data = original
        x.grad = previous_grad
