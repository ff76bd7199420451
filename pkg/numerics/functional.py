# numerics/functional.py
"""Differentiable primitives.

Each function takes Tensors (or array-likes, treated as constants) and returns a
Tensor whose backward closure maps the output gradient to one gradient per
input, with the input's exact shape. Shapes follow numpy conventions; "rows"
are the last axis.
"""
import math

import numpy as np

from numerics.tensor import DTYPE, Tensor, as_tensor, make_result
from ticon_lab.exceptions import NumericalError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    """a + b with broadcasting (covers the broadcast bias add)."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, 'add')


def add_bias(x, bias):
    """x (..., n) + bias (n,)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f'bias {bias.shape} does not match last axis of {x.shape}')
    return add(x, bias)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward, 'sub')


def mul(a, b):
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward, 'mul')


def scale(x, factor):
    """x * constant scalar."""
    x = as_tensor(x)
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return make_result(x.data * factor, (x,), backward, 'scale')


def matmul(a, b):
    """a (..., n, k) @ b (..., k, m); leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul of {a.shape} and {b.shape}')
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward, 'matmul')


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result(np.transpose(x.data, axes), (x,), backward, 'transpose')


def reshape(x, shape):
    x = as_tensor(x)
    original = x.shape

    def backward(g):
        return (g.reshape(original),)

    return make_result(x.data.reshape(shape), (x,), backward, 'reshape')


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), backward, 'sum')


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def gather(x, index, axis=0):
    """Select entries of ``x`` along ``axis`` by an integer index list."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        moved_full = np.moveaxis(full, axis, 0)
        np.add.at(moved_full, index, np.moveaxis(g, axis, 0))
        return (full,)

    return make_result(out, (x,), backward, 'gather')


def mean_over(x, index, axis=0):
    """Mean of the entries of ``x`` at ``index`` along ``axis``.

    The gradient is 1/|index| at the gathered positions and 0 elsewhere.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.size == 0:
        raise ShapeError('mean over an empty index set')
    return mean(gather(x, index, axis=axis), axis=axis)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tuple(tensors), backward, 'concat')


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-token normalization over the last axis with learnable scale/shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        g_xhat = g * gamma.data
        gx = inv_std * (
            g_xhat
            - g_xhat.mean(axis=-1, keepdims=True)
            - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return make_result(out, (x, gamma, beta), backward, 'layer_norm')


def softmax(x, bias=None, mask=None):
    """Softmax over the last axis of ``x + bias``.

    ``bias`` is an additive pre-softmax term (Tensor or array, broadcastable).
    ``mask`` is a boolean array broadcastable to ``x``; False entries are left
    out of the normalization entirely and get probability exactly 0. Every
    row needs at least one kept entry.
    """
    x = as_tensor(x)
    parents = [x]
    logits = x.data
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)
        logits = logits + bias.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        if not np.all(keep.any(axis=-1)):
            raise NumericalError('softmax row with every entry masked out')
        row_max = np.where(keep, logits, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, logits - row_max, 0.0)), 0.0)
    else:
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        grads = [gz]
        if bias is not None:
            grads.append(unbroadcast(gz, bias.shape))
        return tuple(grads)

    return make_result(p, tuple(parents), backward, 'softmax')


def log_softmax(x):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_z
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (x,), backward, 'log_softmax')


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    inner = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return make_result(out, (x,), backward, 'gelu')


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return make_result(out, (x,), backward, 'tanh')


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), backward, 'sigmoid')


def l2_normalize(x):
    """x / ||x|| over the last axis. A zero row is an error."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise NumericalError('l2_normalize of a zero-norm vector')
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return make_result(y, (x,), backward, 'l2_normalize')


def cosine_similarity(a, b):
    """Row-wise cosine over the last axis.

    Computed as the dot product of the two normalized operands, so the
    gradient never divides by anything but the (nonzero) operand norms.
    """
    return sum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


def linear(x, weight, bias=None):
    """x @ weight (+ bias); weight is (in, out)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add_bias(out, bias)
    return out
