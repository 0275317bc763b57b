"""Dense tensors with reverse-mode differentiation, SGD with momentum, cosine lr.

Graph policy: every op records its parents and a backward closure on the output
tensor.  ``backward`` walks the graph once in reverse topological order, sums
gradients over fan-out into ``.grad`` of every leaf with ``requires_grad`` and
then frees the closures, so a graph can be differentiated only once.  Call
``zero_grad`` (or set ``.grad = None``) between steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def _node(data, parents, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _colsum(a):
    """Sum over all leading axes; a BLAS product beats ``sum(axis=(0, 1))`` for narrow last axes."""
    a2 = a.reshape(-1, a.shape[-1])
    return np.ones(a2.shape[0], dtype=a.dtype) @ a2


def _unbroadcast(grad, shape):
    if grad.ndim > len(shape) and len(shape) == 1 and shape[0] == grad.shape[-1]:
        return _colsum(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor):
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, s: float):
    a = as_tensor(a)
    return _node(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))


def reciprocal(a):
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------- reductions and shape

def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def variance(a, axis, keepdims=False):
    """Biased variance over ``axis``."""
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    n = np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = (centered ** 2).mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * 2.0 * centered / n,)
    return _node(out, (a,), bw)


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, idx):
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return _node(np.array(out), (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref))
                                     if i != axis % len(ref)):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _node(a.data @ b.data, (a, b), bw)


def dot(a, b):
    """Row-wise dot product over the last axis."""
    return sum_(mul(a, b), axis=-1)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv1d(x, weight, bias=None, dilation=1):
    """Valid 1-D convolution in (batch, time, channels) layout.

    ``weight`` has shape (kernel, in_channels, out_channels).  Output length is
    ``T - dilation * (kernel - 1)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with weight {weight.shape}")
    k, cin, cout = weight.shape
    B, T, _ = x.shape
    t_out = T - dilation * (k - 1)
    if t_out < 1:
        raise DimensionError(f"conv1d: input length {T} shorter than receptive field "
                             f"{dilation * (k - 1) + 1}")
    if k == 1:
        cols = x.data
    else:
        cols = np.concatenate([x.data[:, j * dilation:j * dilation + t_out, :] for j in range(k)],
                              axis=2)
    w2 = weight.data.reshape(k * cin, cout)
    out = cols @ w2

    def bw(g):
        gw = np.tensordot(cols, g, axes=([0, 1], [0, 1])).reshape(weight.shape)
        gcols = g @ w2.T
        if k == 1:
            gx = gcols
        else:
            gx = np.zeros_like(x.data)
            for j in range(k):
                gx[:, j * dilation:j * dilation + t_out, :] += gcols[:, :, j * cin:(j + 1) * cin]
        return gx, gw
    y = _node(out, (x, weight), bw)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- normalization

def batch_norm(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5):
    """Normalize over every axis but the last (channels).

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (plain arrays) are updated in place with ``momentum``; the
    running variance uses the unbiased estimate.
    """
    if gamma.shape[-1] != x.shape[-1]:
        raise DimensionError(f"batch_norm: {x.shape} vs gamma {gamma.shape}")
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        out = xhat * gamma.data + beta.data

        def bw_eval(g):
            return (g * (gamma.data * inv), _colsum(g * xhat), _colsum(g))
        return _node(out.astype(x.dtype, copy=False), (x, gamma, beta), bw_eval)

    n = x.data.size // x.shape[-1]
    mu = _colsum(x.data) / n
    xc = x.data - mu
    var = _colsum(xc * xc) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    if running_mean is not None:
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))

    def bw(g):
        gsum = _colsum(g)
        gdot = _colsum(g * xhat)
        gx = (g - gsum / n - xhat * (gdot / n)) * (gamma.data * inv)
        return gx, gdot, gsum
    return _node(out, (x, gamma, beta), bw)


def l2_normalize(x, eps=1e-12):
    """Scale rows (last axis) to unit length; ``eps`` sits under the square root."""
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True) + eps)
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)
    return _node(y, (x,), bw)


# ---------------------------------------------------------------- softmax family

def logsumexp(x, axis=-1, mask=None):
    """Stable log-sum-exp along ``axis``; entries where ``mask`` is False are excluded."""
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * e / s,)
    return _node(out.astype(x.dtype, copy=False), (x,), bw)


def softmax(x, axis=-1):
    return exp(sub(x, _expand(logsumexp(x, axis), axis)))


def log_softmax(x, axis=-1):
    return sub(x, _expand(logsumexp(x, axis), axis))


def _expand(a, axis):
    shape = list(a.shape)
    shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
    return reshape(a, tuple(shape))


# ---------------------------------------------------------------- optimization

@dataclass
class OptimizerState:
    """SGD state.  Update convention: ``v <- momentum * v + g``; ``p <- p - lr * v``."""
    momentum: float = 0.9
    current_lr: float = 0.1
    velocity: dict = field(default_factory=dict)


def sgd_step(params: dict, state: OptimizerState, grads: dict | None = None):
    if state.current_lr <= 0:
        raise ContractError(f"learning rate must be positive, got {state.current_lr}")
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        v = state.velocity.get(name)
        v = g.astype(p.dtype, copy=True) if v is None else state.momentum * v + g
        state.velocity[name] = v.astype(p.dtype, copy=False)
        p.data = (p.data - state.current_lr * state.velocity[name]).astype(p.dtype, copy=False)
    return params


@dataclass(frozen=True)
class CosineSchedule:
    lr_start: float = 1e-1
    lr_end: float = 1e-4
    total_steps: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ContractError("total_steps must be positive")


def cosine_lr(step: int, schedule: CosineSchedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    if step == schedule.total_steps:
        return schedule.lr_end
    cos = math.cos(math.pi * step / schedule.total_steps)
    return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (1 + cos)


# ---------------------------------------------------------------- gradient checking

def numerical_grad(fn, x: np.ndarray, h=1e-4, indices=None) -> np.ndarray:
    """Central finite differences of the scalar ``fn(x)``; ``x`` is perturbed in place and restored.

    ``indices`` restricts the sweep to those flat positions; the rest stay zero.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(x.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, with the floor scaled to the gradient magnitude."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.abs(n).max(initial=0.0), np.abs(a).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor + 1e-6 * scale)
    return np.abs(a - n) / denom


def check_gradients(build, inputs: dict, h=1e-4):
    """Compare backprop against central differences for every array in ``inputs``.

    ``build`` maps a dict of float64 Tensors to a scalar Tensor.  Returns
    ``{name: max relative error}``.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in inputs.items()}
    build(tensors).backward()
    out = {}
    for name, arr in inputs.items():
        def f(x, name=name):
            ts = {k: Tensor(x if k == name else v) for k, v in inputs.items()}
            return build(ts).item()
        num = numerical_grad(f, arr, h)
        ana = tensors[name].grad if tensors[name].grad is not None else np.zeros_like(arr)
        out[name] = float(relative_error(ana, num).max())
    return out
