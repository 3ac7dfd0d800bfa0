from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ConfigurationError, DimensionError, NumericError
from .tensor import Tensor, no_grad


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-4,
) -> float:
    """Compare the analytic gradient of scalar ``f`` at ``point`` with central differences.

    Returns the largest per-coordinate ``|a - c| / (|a| + |c| + 1e-12)``.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    base = np.array(point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise DimensionError(f"f must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("f is not finite at the check point")
    out.backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    central = np.empty_like(base)
    with no_grad():
        for i in range(base.size):
            shifted = base.copy()
            shifted.flat[i] = base.flat[i] + eps
            hi = f(Tensor(shifted)).item()
            shifted.flat[i] = base.flat[i] - eps
            lo = f(Tensor(shifted)).item()
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"non-finite evaluation at coordinate {i}")
            central.flat[i] = (hi - lo) / (2.0 * eps)

    err = np.abs(analytic - central) / (np.abs(analytic) + np.abs(central) + 1e-12)
    return float(err.max()) if err.size else 0.0
