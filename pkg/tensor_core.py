"""Dense tensors and a reverse-mode tape.

A `Tensor` is an immutable numpy array, optionally bound to a node on a
`Tape`. Every op below checks whether any of its inputs lives on a tape; if
so the result is recorded together with a vector-Jacobian product closure,
otherwise the op is a plain array computation.
"""
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from errors import DimensionError, UsageError

# Set to True to assert finiteness after every recorded op.
DEBUG_CHECKS = False

FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))

Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _as_array(data, dtype=None):
    array = np.asarray(data, dtype=dtype)
    if array.dtype not in FLOAT_TYPES:
        array = array.astype(np.float64)
    array = array.view()
    array.flags.writeable = False
    return array


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, dtype=None, tape=None, node=None):
        self.data = _as_array(data, dtype)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return np.array(self.data)

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        where = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{where})"


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class _Node:
    op: str
    parents: tuple
    vjp: Optional[Vjp]
    shape: tuple


class Tape:
    """Append-only Wengert list of recorded ops."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def watch(self, value, dtype=None):
        """Register `value` as a leaf and return it bound to this tape."""
        data = value.data if isinstance(value, Tensor) else value
        array = _as_array(data, dtype)
        self.nodes.append(_Node("leaf", (), None, array.shape))
        return Tensor(array, tape=self, node=len(self.nodes) - 1)

    def record(self, op, data, parents, vjp):
        parent_ids = []
        for parent in parents:
            if parent.tape is None:
                parent_ids.append(None)
            elif parent.tape is self:
                parent_ids.append(parent.node)
            else:
                raise UsageError(f"{op}: inputs come from different tapes")
        array = _as_array(data)
        if DEBUG_CHECKS and not np.all(np.isfinite(array)):
            raise FloatingPointError(f"{op} produced non-finite values")
        self.nodes.append(_Node(op, tuple(parent_ids), vjp, array.shape))
        return Tensor(array, tape=self, node=len(self.nodes) - 1)

    def backward(self, scalar):
        return backward(scalar, self)


class GradientStore(Mapping):
    """Gradients keyed by tape node id."""

    def __init__(self, grads, tape):
        self._grads = grads
        self.tape = tape

    def __getitem__(self, node_id):
        return self._grads[node_id]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def grad(self, tensor):
        if tensor.tape is not self.tape or tensor.node is None:
            raise UsageError("tensor was not recorded on this tape")
        if tensor.node in self._grads:
            return Tensor(self._grads[tensor.node])
        return Tensor(np.zeros(tensor.shape, dtype=tensor.dtype))


def backward(scalar, tape):
    """Reverse sweep from a single-element tensor; visits every node once."""
    if scalar.tape is not tape or scalar.node is None:
        raise UsageError("backward: scalar was not produced on this tape")
    if scalar.size != 1:
        raise DimensionError(f"backward needs a single-element output, got shape {scalar.shape}")

    grads = {scalar.node: np.ones(scalar.shape, dtype=scalar.dtype)}
    for node_id in range(scalar.node, -1, -1):
        grad = grads.get(node_id)
        node = tape.nodes[node_id]
        if grad is None or node.vjp is None:
            continue
        parent_grads = node.vjp(grad)
        for parent_id, parent_grad in zip(node.parents, parent_grads):
            if parent_id is None or parent_grad is None:
                continue
            if parent_id in grads:
                grads[parent_id] = grads[parent_id] + parent_grad
            else:
                grads[parent_id] = parent_grad
    return GradientStore(grads, tape)


def _common_tape(tensors):
    tape = None
    for tensor in tensors:
        if tensor.tape is None:
            continue
        if tape is None:
            tape = tensor.tape
        elif tensor.tape is not tape:
            raise UsageError("inputs come from different tapes")
    return tape


def apply(op, data, parents, vjp):
    """Wrap an op result, recording it when any parent is on a tape."""
    tape = _common_tape(parents)
    if tape is None:
        return Tensor(data)
    return tape.record(op, data, parents, vjp)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return apply("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return apply("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return apply("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x, factor):
    x = as_tensor(x)
    factor = float(factor)
    return apply("scale", x.data * x.dtype.type(factor), (x,),
                 lambda g: (g * g.dtype.type(factor),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    # subgradient at 0 is 0
    return apply("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,),
                 lambda g: (g * mask,))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid(x.data).astype(x.dtype)
    return apply("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def _softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    x = as_tensor(x)
    out = _softmax(x.data)
    return apply("softmax", out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def tensor_abs(x):
    x = as_tensor(x)
    sign = np.sign(x.data)
    return apply("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def tensor_sum(x, axis=None):
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return apply("sum", out, (x,), vjp)


def mean(x, axis=None):
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tensor_sum(x, axis), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    return apply("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------- layers

def linear(x, weight, bias=None):
    """x: N x I, weight: O x I, bias: O."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = parents + (bias,)

    def vjp(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return apply("linear", out, parents, vjp)


def channel_affine(x, scale_, shift):
    """Per-channel affine on N x C x H x W; the eval-mode batchnorm."""
    x, scale_, shift = as_tensor(x), as_tensor(scale_), as_tensor(shift)
    if x.ndim != 4 or scale_.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError(f"channel_affine: {x.shape} vs scale {scale_.shape}")
    s = scale_.data[None, :, None, None]
    out = x.data * s + shift.data[None, :, None, None]
    return apply("channel_affine", out, (x, scale_, shift),
                 lambda g: (g * s, (g * x.data).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))))


def global_average_pool(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_average_pool expects N x C x H x W, got {x.shape}")
    h, w = x.shape[2:]
    return apply("global_average_pool", x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),))


def select_class(logits, index):
    """Sum over the batch of one logit column; the attribution objective."""
    logits = as_tensor(logits)
    if logits.ndim != 2 or not 0 <= index < logits.shape[1]:
        raise UsageError(f"target {index} is not a valid class for logits {logits.shape}")

    def vjp(g):
        grad = np.zeros(logits.shape, dtype=logits.dtype)
        grad[:, index] = g
        return (grad,)

    return apply("select_class", logits.data[:, index].sum(), (logits,), vjp)


def gradient_hook(x, fn):
    """Identity in the forward pass; `fn` rewrites the incoming gradient."""
    x = as_tensor(x)
    return apply("gradient_hook", x.data, (x,), lambda g: (fn(g),))


def rescale_nonlinearity(x, reference, kind="relu", eps=1e-7):
    """Nonlinearity whose backward multiplier is the DeepLift rescale ratio.

    Where |x - reference| > eps the multiplier is (f(x) - f(ref)) / (x - ref),
    elsewhere it falls back to the local derivative.
    """
    x = as_tensor(x)
    ref = reference.data if isinstance(reference, Tensor) else np.asarray(reference)
    if kind == "relu":
        out = np.where(x.data > 0, x.data, 0).astype(x.dtype)
        out_ref = np.maximum(ref, 0)
        local = (x.data > 0).astype(x.dtype)
    elif kind == "sigmoid":
        out = _sigmoid(x.data).astype(x.dtype)
        out_ref = _sigmoid(ref)
        local = out * (1 - out)
    else:
        raise UsageError(f"no rescale rule for nonlinearity {kind!r}")
    delta_in = x.data - ref
    safe = np.abs(delta_in) > eps
    ratio = np.divide(out - out_ref, delta_in, out=np.zeros_like(out), where=safe)
    multiplier = np.where(safe, ratio, local)
    return apply(f"rescale_{kind}", out, (x,), lambda g: (g * multiplier,))


# ---------------------------------------------------------------- losses

def cross_entropy(logits, labels):
    logits = as_tensor(logits)
    labels = np.asarray(labels).astype(np.int64)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = (log_norm - shifted[rows, labels]).mean()

    def vjp(g):
        grad = _softmax(z)
        grad[rows, labels] -= 1
        return (grad * (g / z.shape[0]),)

    return apply("cross_entropy", loss, (logits,), vjp)


def binary_cross_entropy_with_logits(logits, labels):
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
    return apply("bce_with_logits", loss, (logits,),
                 lambda g: ((_sigmoid(z) - y) * (g / z.size),))
