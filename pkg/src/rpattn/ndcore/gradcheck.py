"""Central finite-difference check of tape gradients in 64-bit shadow mode."""
import numpy as np

from .tensor import backward, precision


def gradcheck(fn, params, step=1e-4, rtol=1e-4, max_per_tensor=None, seed=0, kink_retry=False, report=False):
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its whole graph on each call so that constants are
    created at float64. Parameters are cast to float64 for the check and
    restored afterwards. Returns the worst relative error, computed as
    |a - n| / max(|a|, |n|, 1e-6) per coordinate.

    Piecewise-linear ops (leaky ReLU, max pooling) have kinks; a central
    difference whose stencil straddles one is wrong by O(1). With
    ``kink_retry`` a failing coordinate is re-measured at ``step / 100``
    and counted as a kink crossing when the finer stencil agrees. With
    ``report`` the return value is ``(worst, n_checked, n_kinks)``.
    """
    rng = np.random.default_rng(seed)
    saved = [(p.data, p.grad, p.requires_grad) for p in params]
    worst = 0.0
    checked = kinks = 0

    def central(flat, k, h):
        orig = flat[k]
        flat[k] = orig + h
        fp = fn().item()
        flat[k] = orig - h
        fm = fn().item()
        flat[k] = orig
        return (fp - fm) / (2 * h)

    try:
        with precision(np.float64):
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = None
                p.requires_grad = True
            loss = fn()
            backward(loss)
            analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
            for p, ga in zip(params, analytic):
                flat = p.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_per_tensor is not None and flat.size > max_per_tensor:
                    coords = rng.choice(flat.size, max_per_tensor, replace=False)
                for k in coords:
                    a = ga.reshape(-1)[k]
                    num = central(flat, k, step)
                    err = abs(a - num) / max(abs(a), abs(num), 1e-6)
                    if err > rtol and kink_retry:
                        fine = central(flat, k, step / 100)
                        fine_err = abs(a - fine) / max(abs(a), abs(fine), 1e-6)
                        if fine_err <= rtol:
                            kinks += 1
                            err = fine_err
                    checked += 1
                    worst = max(worst, err)
    finally:
        for p, (d, g, rg) in zip(params, saved):
            p.data, p.grad, p.requires_grad = d, g, rg
    return (worst, checked, kinks) if report else worst
