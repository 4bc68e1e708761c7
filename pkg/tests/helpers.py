"""Shared test utilities: the central finite-difference gradient oracle."""

import numpy as np


def finite_difference(f, arrays, step=1e-5):
    """Central finite-difference gradients of scalar f() w.r.t. each array.

    Arrays are perturbed in place and restored; f must re-read them on
    every call.  This is the independent oracle checking every analytic
    gradient in the package.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = f()
            flat[i] = orig - step
            lm = f()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    """max |a-n| / max(|a|, |n|, floor) over all elements."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(build_loss, params, step=1e-5, tol=1e-4):
    """Run backward once, compare every parameter gradient against the oracle.

    ``build_loss`` constructs the graph from current parameter data and
    returns the scalar loss tensor.  Returns the worst relative error.
    """
    from bysgnn import autodiff as ad

    for p in params:
        p.grad = None
    loss = build_loss()
    ad.backward(loss)
    # parameters with no path to the loss legitimately end with grad None
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad)
                for p in params]

    def value():
        with ad.no_grad():
            return float(build_loss().data)

    numeric = finite_difference(value, [p.data for p in params], step=step)
    worst = 0.0
    for p, a, n in zip(params, analytic, numeric):
        err = max_rel_error(a, n)
        assert err <= tol, f"gradient mismatch for {getattr(p, 'name', p)}: {err:.3e}"
        worst = max(worst, err)
    return worst
