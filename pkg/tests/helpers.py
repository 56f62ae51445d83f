"""Shared test oracles: finite differences, unit vectors, tiny generators."""
import numpy as np

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-9


def random_unit(rng, *shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def fd_check(loss_fn, tensors, analytic, step=FD_STEP, rtol=FD_RTOL, atol=FD_ATOL):
    """Central finite differences on every entry of every tensor.

    ``loss_fn`` recomputes the scalar loss from the (mutated-in-place) tensors;
    ``analytic`` maps tensor name -> gradient array. Returns the worst relative
    error seen, raising AssertionError on the first violation.
    """
    worst = 0.0
    for name, tensor in tensors.items():
        grad = analytic[name]
        assert grad.shape == tensor.shape, f"{name}: grad shape {grad.shape} != {tensor.shape}"
        flat = tensor.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn()
            flat[i] = orig - step
            lm = loss_fn()
            flat[i] = orig
            fd = (lp - lm) / (2 * step)
            a = gflat[i]
            err = abs(a - fd)
            denom = max(abs(a), abs(fd))
            if err > atol and err > rtol * denom:
                raise AssertionError(
                    f"{name}[{i}]: analytic {a!r} vs finite difference {fd!r} (rel {err / denom:.3g})"
                )
            if denom > 0:
                worst = max(worst, err / denom)
    return worst
