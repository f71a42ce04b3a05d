"""Finite-difference gradient checking shared by the test modules."""

import numpy as np

from tsan.autodiff import Tensor, backward, finite_difference_gradient, record


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max componentwise error scaled by the numeric gradient's magnitude."""
    denom = max(1.0, float(np.max(np.abs(numeric))) if numeric.size else 0.0)
    return float(np.max(np.abs(analytic - numeric))) / denom


def check_gradients(build_loss, leaves: dict, eps: float = 1e-5, tol: float = 1e-5):
    """Compare analytic gradients of ``build_loss`` against central differences.

    ``build_loss`` is a zero-argument callable returning a scalar Tensor built
    from the Tensors in ``leaves`` (name -> Tensor, all requires_grad). The
    finite-difference oracle re-evaluates the very same closure, so it stays
    independent of the recorded backward path.
    """
    for t in leaves.values():
        t.zero_grad()
    with record():
        loss = build_loss()
        backward(loss)
    errs = {}
    for name, t in leaves.items():
        numeric = finite_difference_gradient(lambda _t: build_loss(), t, eps=eps)
        err = relative_error(t.grad, numeric)
        errs[name] = err
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e} >= {tol:.1e}"
    return errs


def leaf(rng, shape, scale=1.0, name="x") -> Tensor:
    t = Tensor(rng.uniform(-1.0, 1.0, size=shape) * scale, requires_grad=True, name=name)
    return t
