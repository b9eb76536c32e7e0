"""Linear beta schedule, closed-form forward noising and ancestral reverse steps.

Indexing: arrays have length ``T + 1`` with entry 0 standing for clean data
(``alpha_bar[0] == 1``), so ``forward_sample(y0, 0, eps) == y0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # float64, index 0 is a zero placeholder
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray  # sqrt(alpha_bar): signal scale
    lam: np.ndarray  # sqrt(1 - alpha_bar): noise scale

    def check_step(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ContractError(f"step {t} outside [{lo}, {self.T}]")
        return t


def build_linear_schedule(T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.0120) -> NoiseSchedule:
    if T < 1:
        raise ContractError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(alpha_bar)
    lam = np.sqrt(1.0 - alpha_bar)
    for arr in (beta, alpha, alpha_bar, sigma, lam):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma, lam)


def _per_sample(values: np.ndarray, t, ndim: int) -> np.ndarray:
    """Gather schedule values for scalar or per-batch ``t`` shaped to broadcast."""
    v = np.asarray(values[np.asarray(t)], dtype=np.float32)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (ndim - 1))


def forward_sample(y0: np.ndarray, t, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """``y_t = sigma_t * y0 + lam_t * eps``; ``t`` may be an int or one per batch row."""
    y0 = np.asarray(y0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if y0.shape != eps.shape:
        raise ContractError(f"y0 {y0.shape} and eps {eps.shape} differ")
    tt = np.asarray(t)
    if tt.size and (tt.min() < 0 or tt.max() > s.T):
        raise ContractError(f"step {t} outside [0, {s.T}]")
    sig = _per_sample(s.sigma, tt, y0.ndim)
    lam = _per_sample(s.lam, tt, y0.ndim)
    return sig * y0 + lam * eps


def predict_x0(y_t: np.ndarray, eps_hat: np.ndarray, t, s: NoiseSchedule) -> np.ndarray:
    sig = _per_sample(s.sigma, t, y_t.ndim)
    lam = _per_sample(s.lam, t, y_t.ndim)
    return (y_t - lam * eps_hat) / sig


def ancestral_step(
    y_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int,
    s: NoiseSchedule,
    noise: np.ndarray | None = None,
    clip_x0: float | None = None,
) -> np.ndarray:
    """One DDPM posterior step from ``t`` down to ``t_prev`` (which may skip steps).

    Uses the beta-tilde posterior variance of the respaced chain.  ``noise``
    of ``None`` gives the deterministic posterior mean; at ``t_prev == 0`` no
    noise is ever added.
    """
    t, t_prev = int(t), int(t_prev)
    if not t_prev < t:
        raise ContractError(f"t_prev ({t_prev}) must be < t ({t})")
    s.check_step(t)
    s.check_step(t_prev, allow_zero=True)
    if y_t.shape != eps_hat.shape:
        raise ContractError(f"y_t {y_t.shape} and eps_hat {eps_hat.shape} differ")
    ab_t = s.alpha_bar[t]
    ab_prev = s.alpha_bar[t_prev]
    x0 = (y_t - s.lam[t] * eps_hat) / s.sigma[t]
    if clip_x0 is not None:
        x0 = np.clip(x0, -clip_x0, clip_x0)
    alpha_step = ab_t / ab_prev
    beta_step = 1.0 - alpha_step
    c_x0 = np.sqrt(ab_prev) * beta_step / (1.0 - ab_t)
    c_xt = np.sqrt(alpha_step) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c_x0 * x0 + c_xt * y_t
    if t_prev == 0 or noise is None:
        return mean.astype(np.float32)
    if noise.shape != y_t.shape:
        raise ContractError("noise shape mismatch")
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_step
    return (mean + np.sqrt(var) * noise).astype(np.float32)


def strided_steps(T: int, n: int) -> list[int]:
    """``n`` evenly spaced, strictly decreasing steps starting at ``T``; the last hops to 0."""
    if not 1 <= n <= T:
        raise ContractError(f"need 1 <= n <= T, got n={n}, T={T}")
    return [T - (i * T) // n for i in range(n)]
