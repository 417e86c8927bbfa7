"""Central finite-difference oracle for the autodiff engine.

The numeric side only ever reads forward values, so it is independent of
every backward rule it checks.
"""
import numpy as np

from sparselab import autodiff as ad

H = 1e-5


def numeric_grad(f, arrays, i, h=H):
    """d f / d arrays[i] by central differences; ``f`` maps arrays to a float."""
    x = arrays[i]
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        fp = f(arrays)
        flat[j] = old - h
        fm = f(arrays)
        flat[j] = old
        gflat[j] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric):
    """Largest absolute deviation scaled by the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check(fn, arrays, wrt=None, h=H):
    """Max relative error over the inputs in ``wrt`` (default: all).

    ``fn`` takes Tensors and returns a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(fn(*ts))

    def value(arrs):
        with ad.no_grad():
            return fn(*[ad.Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i in wrt:
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, relative_error(analytic, numeric_grad(value, arrays, i, h)))
    return worst


def check_params(loss_fn, params, h=H):
    """Gradient check over a dict of named parameter Tensors (mutated in place and restored).

    Errors are scaled by the largest gradient entry over all parameters, so a
    tensor whose true gradient is identically zero (e.g. a key bias under a
    shift-invariant softmax) is judged against the model's gradient scale
    rather than against its own finite-difference noise.
    """
    for p in params.values():
        p.grad = None
    ad.backward(loss_fn())
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
    numeric = {}
    for k, p in params.items():
        def value(_arrs):
            with ad.no_grad():
                return loss_fn().item()
        numeric[k] = numeric_grad(value, [p.data], 0, h)
    scale = max(max(np.abs(a).max() for a in analytic.values()),
                max(np.abs(n).max() for n in numeric.values()), 1e-12)
    return {k: float(np.abs(analytic[k] - numeric[k]).max() / scale) for k in params}
