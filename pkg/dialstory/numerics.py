"""
Dense-tensor math with reverse-mode automatic differentiation.
This module is the numeric core every model in the toolkit trains on. It provides:
- A Tensor wrapping a numpy array plus an optional gradient
- A dynamic tape: every differentiable op records a Function node, rebuilt per step
- backward() walking the tape in reverse topological order
- Numerically stabilized softmax / cross-entropy / layer normalization kernels (scipy.special)
- Switchable 32/64-bit precision, central finite differences for gradient checks

Typical Usage:
1. Build leaf tensors with requires_grad=True (model parameters)
2. Compose ops (matmul, softmax, silu, layer_norm, ...) into a scalar loss
3. Call backward(loss) to populate .grad on every leaf
4. Hand the gradients to the optimizer (dialstory.optim)
"""

# =============================================================================
# GLOBAL CONFIGURATION VARIABLES
# =============================================================================

FLOAT64_ENV_VAR = "DIALSTORY_FLOAT64"     # Set to 1 to force 64-bit numerics globally
LAYER_NORM_EPSILON = 1e-5                 # Added to the variance before the square root
FINITE_DIFFERENCE_STEP = 1e-4             # Central-difference step for gradient checks
RELATIVE_ERROR_FLOOR = 1.0                # Gradient entries below this are compared absolutely

# =============================================================================

import os
from contextlib import contextmanager

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from dialstory.errors import NumericalError, ShapeError


def _dtype_from_environment():
    """Pick the default floating point type, honouring DIALSTORY_FLOAT64."""
    flag = os.environ.get(FLOAT64_ENV_VAR, "").strip().lower()
    return np.float64 if flag in ("1", "true", "yes", "on") else np.float32


_DTYPE = _dtype_from_environment()   # Active precision for every new tensor
_GRAD_ENABLED = True                 # False inside no_grad(): ops skip recording


def get_dtype():
    """Return the numpy dtype new tensors are created with."""
    return _DTYPE


def set_precision(bits: int):
    """
    Switch the global precision mode.
    Args:
        bits: 32 (training default) or 64 (gradient checks)
    """
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")


@contextmanager
def precision(bits: int):
    """Temporarily run in the given precision mode."""
    previous = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(64 if previous == np.float64 else 32)


@contextmanager
def no_grad():
    """Evaluate without recording the tape (inference, validation, generation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """
    A dense array plus the bookkeeping reverse-mode differentiation needs.
    Attributes:
        data (np.ndarray): Value, stored in the active precision
        grad (np.ndarray | None): Accumulated gradient, same shape as data once populated
        requires_grad (bool): Whether gradients should flow to / through this tensor
        name (str | None): Optional label, used for parameters
    """

    def __init__(self, data, requires_grad=False, _ctx=None, name=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._ctx = _ctx
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    # Operator sugar
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        return Transpose.apply(self, axes=axes or None)

    def swapaxes(self, first, second):
        axes = list(range(self.ndim))
        axes[first], axes[second] = axes[second], axes[first]
        return Transpose.apply(self, axes=tuple(axes))


def tensor(data, requires_grad=False, name=None):
    """Create a tensor in the active precision."""
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(rng, shape, fan_in=None, name=None):
    """
    Create a trainable tensor initialised uniformly in (-1/sqrt(fan_in), +1/sqrt(fan_in)).
    Args:
        rng (np.random.Generator): Source of randomness
        shape (tuple): Parameter shape
        fan_in (int, optional): Defaults to the first dimension
        name (str, optional): Parameter name
    """
    fan_in = fan_in or shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_parameter(shape, name=None):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones_parameter(shape, name=None):
    return Tensor(np.ones(shape), requires_grad=True, name=name)


class Function:
    """
    One recorded operation. Subclasses implement forward on raw arrays and backward
    returning one gradient (or None) per parent.
    """

    def __init__(self, *parents):
        self.parents = parents
        self.saved = ()

    @classmethod
    def apply(cls, *args, **kwargs):
        parents = tuple(arg if isinstance(arg, Tensor) else Tensor(arg) for arg in args)
        ctx = cls(*parents)
        output = ctx.forward(*(p.data for p in parents), **kwargs)
        needs_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        return Tensor(output, requires_grad=needs_grad, _ctx=ctx if needs_grad else None)

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, x, y):
        self.saved = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        shape_x, shape_y = self.saved
        return unbroadcast(grad, shape_x), unbroadcast(grad, shape_y)


class Sub(Function):
    def forward(self, x, y):
        self.saved = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        shape_x, shape_y = self.saved
        return unbroadcast(grad, shape_x), unbroadcast(-grad, shape_y)


class Mul(Function):
    def forward(self, x, y):
        self.saved = (x, y)
        return x * y

    def backward(self, grad):
        x, y = self.saved
        return unbroadcast(grad * y, x.shape), unbroadcast(grad * x, y.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.saved
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.saved = axes if axes is not None else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.saved)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.saved)),)


class Reshape(Function):
    def forward(self, x, shape):
        self.saved = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.saved),)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.saved = (x.shape, axis, keepdims)
        return x.sum(axis=axis, keepdims=keepdims)

    def backward(self, grad):
        shape, axis, keepdims = self.saved
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        self.saved = (x.shape, axis, keepdims, count)
        return x.mean(axis=axis, keepdims=keepdims)

    def backward(self, grad):
        shape, axis, keepdims, count = self.saved
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / count, shape).copy(),)


class GetItem(Function):
    """Basic and integer-array indexing; gradients scatter-add back (np.add.at)."""

    def forward(self, x, index):
        self.saved = (x.shape, index)
        return x[index]

    def backward(self, grad):
        shape, index = self.saved
        out = np.zeros(shape, dtype=grad.dtype)
        np.add.at(out, index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.saved = ([a.shape[axis] for a in arrays], axis)
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        sizes, axis = self.saved
        return tuple(np.split(grad, np.cumsum(sizes)[:-1], axis=axis))


class Softmax(Function):
    def forward(self, x, axis=-1):
        if not np.all(np.isfinite(x)):
            raise NumericalError("softmax received non-finite input")
        shifted = x - x.max(axis=axis, keepdims=True)
        exps = np.exp(shifted)
        out = exps / exps.sum(axis=axis, keepdims=True)
        self.saved = (out, axis)
        return out

    def backward(self, grad):
        out, axis = self.saved
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)


class SiLU(Function):
    def forward(self, x):
        sig = expit(x)
        self.saved = (x, sig)
        return x * sig

    def backward(self, grad):
        x, sig = self.saved
        return (grad * (sig + x * sig * (1.0 - sig)),)


class ReLU(Function):
    def forward(self, x):
        self.saved = x > 0
        return np.where(self.saved, x, 0.0)

    def backward(self, grad):
        return (grad * self.saved,)


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps=LAYER_NORM_EPSILON):
        centered = x - x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
        normed = centered * inv_std
        self.saved = (normed, inv_std, gain)
        return normed * gain + bias

    def backward(self, grad):
        normed, inv_std, gain = self.saved
        width = normed.shape[-1]
        grad_gain = (grad * normed).reshape(-1, width).sum(axis=0)
        grad_bias = grad.reshape(-1, width).sum(axis=0)
        grad_normed = grad * gain
        grad_x = (inv_std / width) * (
            width * grad_normed
            - grad_normed.sum(axis=-1, keepdims=True)
            - normed * (grad_normed * normed).sum(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias


class CrossEntropy(Function):
    """Summed -log softmax(logits)[target] over the rows of a (V,) or (N, V) logit tensor."""

    def forward(self, logits, targets):
        rows = np.atleast_2d(logits)
        targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
        if rows.shape[0] != targets.shape[0]:
            raise ShapeError(f"cross_entropy got {rows.shape[0]} logit rows but {targets.shape[0]} targets")
        width = rows.shape[-1]
        bad = (targets < 0) | (targets >= width)
        if np.any(bad):
            raise ShapeError(f"target index {int(targets[bad][0])} outside class axis of size {width}")
        lse = logsumexp(rows, axis=-1)
        picked = rows[np.arange(rows.shape[0]), targets]
        self.saved = (np.exp(rows - lse[:, None]), targets, logits.shape)
        return (lse - picked).sum()

    def backward(self, grad):
        probs, targets, shape = self.saved
        out = probs.copy()
        out[np.arange(out.shape[0]), targets] -= 1.0
        return ((out * grad).reshape(shape),)


class BinaryCrossEntropyWithLogits(Function):
    """Summed binary cross-entropy of sigmoid(logits) against 0/1 labels."""

    def forward(self, logits, labels):
        labels = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
        self.saved = (logits, labels)
        return -(labels * log_expit(logits) + (1.0 - labels) * log_expit(-logits)).sum()

    def backward(self, grad):
        logits, labels = self.saved
        return (grad * (expit(logits) - labels),)


def matmul(a, b):
    """
    Matrix product over the last two axes (leading axes broadcast).
    Raises:
        ShapeError: when the inner dimensions disagree, naming both shapes
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return MatMul.apply(a, b)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def silu(x):
    return SiLU.apply(x)


def relu(x):
    return ReLU.apply(x)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPSILON):
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(f"layer_norm width mismatch: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    return LayerNorm.apply(x, gain, bias, eps=eps)


def cross_entropy(logits, targets):
    return CrossEntropy.apply(logits, targets=targets)


def binary_cross_entropy_with_logits(logits, labels):
    return BinaryCrossEntropyWithLogits.apply(logits, labels=labels)


def take(x, index):
    return GetItem.apply(x, index=index)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity in eval mode or when rate is 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def _topological_order(root):
    """Post-order over the recorded graph, parents before children (iterative)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss):
    """
    Run reverse-mode differentiation from a scalar loss.
    Leaf gradients accumulate into .grad (so several losses can be summed into one step);
    the recorded graph is consumed and cannot be replayed.
    Args:
        loss (Tensor): Scalar result of a recorded computation
    Returns:
        dict: Leaf tensor -> gradient array, for every requires_grad leaf reached
    Raises:
        ShapeError: when loss is not a scalar
        NumericalError: when the graph was already consumed
    """
    if loss._released:
        raise NumericalError("graph already consumed by an earlier backward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    order = _topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        ctx = node._ctx
        if ctx is None:
            node.grad = grad.astype(node.data.dtype, copy=True) if node.grad is None else node.grad + grad
            leaves[node] = node.grad
            continue
        for parent, parent_grad in zip(ctx.parents, ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        node._ctx = None
        node._released = True
    return leaves


def numerical_gradient(loss_fn, target, step=FINITE_DIFFERENCE_STEP):
    """
    Central finite differences of a scalar-valued loss_fn() with respect to target.data.
    loss_fn is re-evaluated twice per entry; target.data is perturbed in place and restored.
    """
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = float(loss_fn().data)
            flat[i] = original - step
            minus = float(loss_fn().data)
            flat[i] = original
            grad_flat[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor=RELATIVE_ERROR_FLOOR):
    """
    Largest elementwise |a - n| / max(|a|, |n|, floor) between two gradient arrays.
    Entries smaller than floor are compared on an absolute scale, so gradients that vanish
    analytically are not judged against finite-difference round-off.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"gradient shapes differ: {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
