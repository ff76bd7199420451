# numerics/tensor.py
"""Dense float64 tensors with a reverse-mode tape.

Every differentiable computation in the project goes through this module and
``numerics.functional``. A Tensor owns an immutable-by-convention numpy array;
operations never write into their inputs' arrays.
"""
import contextlib

import numpy as np

from ticon_lab.exceptions import NumericalError, ShapeError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled():
    return _grad_enabled


def check_finite(array, what):
    if not np.all(np.isfinite(array)):
        raise NumericalError(f'non-finite value in {what}')


class Tensor:
    def __init__(self, data, requires_grad=False, parents=(), backward=None, op='leaf'):
        self.data = np.asarray(data, dtype=DTYPE)
        check_finite(self.data, f'{op} output')
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.op = op

    def __repr__(self):
        return f'Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})'

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor on the tape."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f'backward() without a seed needs a scalar, got shape {self.shape}')
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise ShapeError(f'seed gradient shape {grad.shape} does not match {self.shape}')

        order = _topological_order(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(f'{node.op} backward produced {g.shape} for a {parent.shape} input')
                check_finite(g, f'{node.op} backward')
                parent.grad = g if parent.grad is None else parent.grad + g

    # operators delegate to numerics.functional
    def __add__(self, other):
        from numerics import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from numerics import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from numerics import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from numerics import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from numerics import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from numerics import functional as F
        return F.matmul(self, other)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_result(data, parents, backward, op):
    """Wrap an op output, recording it on the tape when any input needs a gradient."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward, op=op)
    return Tensor(data, op=op)


def parameter(data):
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, op='param')


def _topological_order(root):
    # iterative DFS; recursion would overflow on deep tapes
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order
