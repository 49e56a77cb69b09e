"""Central finite-difference gradient oracle, independent of the kit."""

import numpy as np

EPS = 1e-5
REL_TOL = 1e-4


def numeric_grad(f, x, eps=EPS):
    """Central differences of a scalar function w.r.t. array x."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def assert_grads_close(analytic, numeric, rel_tol=REL_TOL, context=""):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), 1e-8)
    err = np.abs(analytic - numeric).max(initial=0.0) / scale
    assert err < rel_tol, f"{context}: relative gradient error {err:.3e}"


def check_param_grads(loss_and_grads, params, names=None, rel_tol=REL_TOL):
    """Check analytic parameter gradients against finite differences.

    ``loss_and_grads()`` must return (loss, grads_dict) evaluated at the
    current contents of ``params``; the check perturbs params in place.
    """
    _, grads = loss_and_grads()
    for name in names or params:
        def f(_arr, name=name):
            loss, _ = loss_and_grads()
            return loss

        num = numeric_grad(f, params[name])
        assert_grads_close(grads[name], num, rel_tol, context=name)
