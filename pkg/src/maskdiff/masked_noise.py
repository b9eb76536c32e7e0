"""Static/dynamic noise algebra and the mask blend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .schedule import NoiseSchedule
from .tensor import Tensor


@dataclass
class NoisePair:
    static: np.ndarray
    dynamic: np.ndarray


def exact_decompose(y0, y_ref, eps, t: int, s: NoiseSchedule) -> NoisePair:
    """Split ``eps`` into the part explained by ``y_ref`` and the remainder.

    Only used to check the algebra; training goes through ``approx_static``.
    """
    y0, y_ref, eps = (np.asarray(a, dtype=np.float64) for a in (y0, y_ref, eps))
    if not y0.shape == y_ref.shape == eps.shape:
        raise ContractError("y0, y_ref and eps must share a shape")
    t = s.check_step(t, allow_zero=True)
    lam = s.lam[t]
    if lam == 0.0:
        raise ContractError("decomposition undefined at t=0 (no noise)")
    sig = s.sigma[t]
    static = (y_ref - sig * y0) / lam
    dynamic = (sig * y0 - y_ref + lam * eps) / lam
    return NoisePair(static, dynamic)


def approx_static(y_ref, y_t, lam: np.ndarray | float | None = None):
    """Static channel ``y_ref - y_t``; divided by ``lam`` when given (scaled variant).

    Works on numpy arrays or ``Tensor``s; ``lam`` broadcasts per batch row.
    """
    if y_ref.shape != y_t.shape:
        raise ContractError(f"y_ref {y_ref.shape} vs y_t {y_t.shape}")
    out = y_ref - y_t
    if lam is not None:
        out = out / lam
    return out


def blend(m, static, dynamic):
    """``m * static + (1 - m) * dynamic`` with a one-channel mask broadcast over channels."""
    mdata = m.data if isinstance(m, Tensor) else np.asarray(m)
    if mdata.min() < 0.0 or mdata.max() > 1.0:
        raise ContractError("mask values must lie in [0, 1]")
    if static.shape != dynamic.shape:
        raise ContractError(f"static {static.shape} vs dynamic {dynamic.shape}")
    if mdata.shape[-2:] != static.shape[-2:] or mdata.shape[-3] != 1:
        raise ContractError(f"mask {mdata.shape} does not match noise {static.shape}")
    if isinstance(m, Tensor) or isinstance(static, Tensor) or isinstance(dynamic, Tensor):
        m = m if isinstance(m, Tensor) else Tensor(m)
        return m * static + (1.0 - m) * dynamic
    return m * static + (1.0 - m) * dynamic


def diffusion_loss(eps_hat, eps) -> Tensor:
    """Mean squared error over every element."""
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    return T.mse(eps_hat, eps)
