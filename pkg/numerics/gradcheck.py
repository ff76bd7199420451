# numerics/gradcheck.py
import numpy as np

from numerics.tensor import Tensor, check_finite


def grad_check(f, x, eps=1e-6):
    """Largest relative disagreement between backprop and central differences.

    ``f`` maps a Tensor shaped like ``x`` to a scalar Tensor. The error per
    component is |analytic - numeric| / max(1, |numeric|).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    trial = Tensor(base.copy(), requires_grad=True)
    out = f(trial)
    out.backward()
    analytic = trial.grad if trial.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += eps
        minus[i] -= eps
        f_plus = f(Tensor(plus.reshape(base.shape))).item()
        f_minus = f(Tensor(minus.reshape(base.shape))).item()
        flat[i] = (f_plus - f_minus) / (2.0 * eps)
    check_finite(numeric, 'finite-difference gradient')
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
