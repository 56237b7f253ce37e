"""Independent reference computations shared by the test modules."""

import numpy as np

from byol import tensor as T


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` at array ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_grads(build, arrays, h=1e-6):
    """Compare tape gradients of ``build(*tensors) -> scalar`` with central differences.

    Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(build(*leaves))
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f(x, k=k):
            args = [T.Tensor(a) for a in arrays]
            args[k] = T.Tensor(x)
            with T.no_grad():
                return float(build(*args).data)
        num = numeric_grad(f, arrays[k], h)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, rel_err(ana, num))
    return worst


def _kink_safe_slope(f, set_x, old, h, min_h=1e-9):
    """Central difference at ``old``, shrinking ``h`` while the one-sided slopes disagree.

    Asymmetry well above rounding noise means the stencil straddles a ReLU kink;
    smooth curvature alone gives relative asymmetry of order h.
    """
    set_x(old)
    f0 = f()
    while True:
        set_x(old + h)
        up = f()
        set_x(old - h)
        down = f()
        set_x(old)
        fwd, bwd = (up - f0) / h, (f0 - down) / h
        noise = 1e-13 * max(abs(f0), 1.0) / h  # rounding level of a one-sided slope
        if abs(fwd - bwd) <= 1e-5 * max(abs(fwd), abs(bwd)) + noise or h / 10 < min_h:
            return (up - down) / (2 * h)
        h /= 10


def param_grad_check(pair, loss_fn, names, rng, n_coords=6, h=1e-6):
    """Spot-check d loss / d theta at random coordinates of the named online parameters."""
    pair.zero_grad()
    T.backward(loss_fn())
    ana = {n: pair.online[n].grad.copy() for n in names}
    worst = 0.0

    def value():
        with T.no_grad():
            return float(loss_fn().data)

    for n in names:
        flat = pair.online[n].data.reshape(-1)
        for j in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            num = _kink_safe_slope(value, lambda v: flat.__setitem__(j, v), flat[j], h)
            a = ana[n].reshape(-1)[j]
            scale = max(abs(a), abs(num), 1e-6)
            worst = max(worst, abs(a - num) / scale)
    return worst
