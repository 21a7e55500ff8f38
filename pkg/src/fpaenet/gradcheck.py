"""Central finite-difference gradient checking."""
import contextlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol=1e-3):
        return self.max_rel_error <= tol


def _scalar(out):
    if not isinstance(out, T.Tensor) or out.size != 1:
        shape = getattr(out, "shape", type(out))
        raise ShapeError(f"grad_check needs a scalar-valued function, got {shape}")
    return out


def grad_check(f, point, step=1e-4, indices=None):
    """Compare backward's gradient w.r.t. ``point`` with central differences.

    ``f`` maps ``point`` to a scalar tensor.  ``point.data`` is perturbed in
    place and restored, so ``f`` may equally ignore its argument and read a
    model parameter that *is* ``point``.  ``indices`` restricts the check to a
    subset of flat coordinates.
    """
    if not point.requires_grad:
        raise ValueError("grad_check point must require grad")
    point.grad = None
    loss = _scalar(f(point))
    loss.backward()
    if point.grad is None:
        analytic_full = np.zeros(point.size)
    else:
        analytic_full = np.asarray(point.grad, dtype=np.float64).ravel()
    flat = point.data.reshape(-1)
    idx = np.arange(point.size) if indices is None else np.asarray(indices, dtype=np.int64)
    numeric = np.empty(idx.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        up = float(_scalar(f(point)).data)
        flat[i] = orig - step
        down = float(_scalar(f(point)).data)
        flat[i] = orig
        numeric[n] = (up - down) / (2.0 * step)
    analytic = analytic_full[idx]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    point.grad = None
    return GradCheckReport(float(rel.max(initial=0.0)), float(rel.mean()) if rel.size else 0.0, analytic, numeric)


@contextlib.contextmanager
def inject_fault(op="relu"):
    """Temporarily corrupt one gradient rule (negative control for the suite)."""
    name = {"relu": "_relu_grad", "sigmoid": "_sigmoid_grad"}[op]
    original = getattr(T, name)
    setattr(T, name, lambda g, aux: 0.5 * original(g, aux))
    try:
        yield
    finally:
        setattr(T, name, original)
