"""Central finite-difference oracle for the autodiff tests."""
import numpy as np

from diffbci.autodiff import Tensor, mul, sum_all

STEP = 1e-5


def numeric_grad(f, arrays, i, step=STEP):
    """d f / d arrays[i] by central differences; ``f`` maps arrays -> float."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        hi = f(arrays)
        x[idx] = old - step
        lo = f(arrays)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * step)
    return g


def rel_error(a, b, floor=1e-7):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_op(op, arrays, seed=0, step=STEP):
    """Max relative error between backprop and finite differences for every input.

    A fixed random projection turns the op's output into a scalar, so every
    output element contributes to the gradient.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = None

    def scalar(arrs, track=False):
        nonlocal probe
        ts = [Tensor(a.copy(), requires_grad=track) for a in arrs]
        out = op(*ts)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return sum_all(mul(out, probe)), ts

    loss, ts = scalar(arrays, track=True)
    loss.backward()
    worst = 0.0
    for i, t in enumerate(ts):
        num = numeric_grad(lambda arrs: float(scalar(arrs)[0].data), arrays, i, step)
        got = t.grad if t.grad is not None else np.zeros_like(num)
        worst = max(worst, rel_error(got, num))
    return worst
