import numpy as np
import pytest

from fedcvgl import tensor as T


@pytest.fixture
def f64_mode():
    """Run a test with float64 storage (the oracle-test mode)."""
    with T.default_dtype(np.float64):
        yield


def numerical_gradient(fn, arrays, index, h=1e-3):
    """Central-difference gradient of scalar fn(*arrays) w.r.t. arrays[index].

    Independent of the autodiff engine: re-evaluates the forward function with
    perturbed copies of the input arrays.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    for i in range(flat.size):
        hi = [b.copy() for b in base]
        lo = [b.copy() for b in base]
        hi[index].reshape(-1)[i] += h
        lo[index].reshape(-1)[i] -= h
        flat[i] = (fn(*hi) - fn(*lo)) / (2.0 * h)
    return grad


def gradcheck(build, arrays, h=1e-3, rtol=1e-3):
    """Compare autodiff grads of scalar build(*tensors) with finite differences.

    ``build`` receives Tensors and must return a scalar Tensor; the numerical
    side re-runs it on plain perturbed arrays through the same builder.
    """
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    T.backward(loss)

    def forward_value(*arrs):
        with T.no_grad():
            return build(*[T.Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i, t in enumerate(tensors):
        assert t.grad is not None, f"input {i} got no gradient"
        num = numerical_gradient(forward_value, arrays, i, h=h)
        scale = max(1e-6, float(np.max(np.abs(num))), float(np.max(np.abs(t.grad))))
        err = float(np.max(np.abs(t.grad.astype(np.float64) - num))) / scale
        worst = max(worst, err)
        assert err < rtol, f"input {i}: autodiff/FD mismatch {err:.3e} (rtol {rtol})"
    return worst
