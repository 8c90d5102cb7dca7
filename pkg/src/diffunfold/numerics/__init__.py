"""Arrays, reverse-mode tape, seeded randomness and gradient auditing."""

import numpy as np

from . import ops
from .gradcheck import finite_difference_gradient, relative_error
from .rng import Rng, randn
from .tape import Param, Var, as_var, backward, grad_enabled, no_grad, value_of, zero_grad


def as_real_view(z: np.ndarray) -> np.ndarray:
    """Complex array -> real array with a trailing (re, im) axis, sharing memory."""
    z = np.ascontiguousarray(z)
    if not np.iscomplexobj(z):
        raise TypeError("expected a complex array")
    real_dtype = np.float32 if z.dtype == np.complex64 else np.float64
    return z[..., None].view(real_dtype)


def from_real_view(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`as_real_view`."""
    r = np.ascontiguousarray(r)
    if r.shape[-1] != 2:
        raise ValueError(f"trailing axis must have extent 2, got {r.shape}")
    cdtype = np.complex64 if r.dtype == np.float32 else np.complex128
    return r.astype(np.float64 if cdtype == np.complex128 else np.float32, copy=False).view(cdtype)[..., 0]


__all__ = [
    "ops", "Param", "Var", "Rng", "as_var", "backward", "finite_difference_gradient",
    "grad_enabled", "no_grad", "randn", "relative_error", "value_of", "zero_grad",
    "as_real_view", "from_real_view",
]
