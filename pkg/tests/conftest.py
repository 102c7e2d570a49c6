"""Shared numeric oracles for the test suite.

The central-difference checker here is the ground truth that every
backward pass in the package is judged against: float64 throughout,
step 1e-5, relative error below 1e-4 (absolute 1e-7 when the reference
gradient is ~0).
"""

import numpy as np

from mixsiam.autodiff import tensor

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7


def numeric_grad(f, x, step=FD_STEP):
    """Central-difference gradient of scalar-valued f at float64 array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = float(f(x))
        flat[i] = keep - step
        lo = float(f(x))
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def grad_gap(analytic, numeric):
    """Worst-case discrepancy: relative where the reference is sizable,
    absolute where it vanishes. Pass means `gap < 1`."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.abs(numeric)
    rel = np.abs(analytic - numeric) / np.maximum(scale, 1e-30)
    abs_err = np.abs(analytic - numeric)
    gap = np.where(scale > 1e-3, rel / REL_TOL, abs_err / ABS_TOL)
    return float(np.max(gap)) if gap.size else 0.0


def param_fd_check(params, forward, step=FD_STEP):
    """Check autodiff grads of `forward() -> scalar Tensor` against central
    differences for every model parameter, perturbing buffers in place.
    Returns the worst gap (pass < 1)."""
    loss = forward()
    loss.backward()
    worst = 0.0
    for name, t in params.tensors.items():
        assert t.grad is not None, f"{name} received no gradient"
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = float(forward().data)
            flat[i] = keep - step
            lo = float(forward().data)
            flat[i] = keep
            num[i] = (hi - lo) / (2.0 * step)
        worst = max(worst, grad_gap(t.grad.reshape(-1), num))
    return worst


def check_grads(f, arrays, step=FD_STEP):
    """Compare autodiff grads of scalar `f(*tensors)` against central
    differences for every input array. Returns the worst gap (pass < 1)."""
    tensors = [tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = f(*tensors)
    out.backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        def scalar_f(x, i=i):
            probe = [np.array(a, dtype=np.float64) for a in arrays]
            probe[i] = x
            probe_t = [tensor(p) for p in probe]
            return f(*probe_t).data
        num = numeric_grad(scalar_f, np.asarray(arrays[i], dtype=np.float64), step=step)
        assert t.grad is not None, f"input {i} received no gradient"
        worst = max(worst, grad_gap(t.grad, num))
    return worst
