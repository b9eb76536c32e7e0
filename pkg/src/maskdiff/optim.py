"""AdamW and exponential moving averages of weights."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import DTYPE, Tensor


class AdamW:
    """Decoupled-weight-decay Adam (Loshchilov & Hutter), torch semantics."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ContractError("gradient count does not match parameter count")
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        step_size = self.lr / bc1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ContractError(f"grad shape {g.shape} != param shape {p.shape}")
            if self.weight_decay:
                p.data *= DTYPE(1.0 - self.lr * self.weight_decay)
            m *= DTYPE(b1)
            m += DTYPE(1.0 - b1) * g
            v *= DTYPE(b2)
            v += DTYPE(1.0 - b2) * g * g
            denom = np.sqrt(v / DTYPE(bc2)) + DTYPE(self.eps)
            p.data -= DTYPE(step_size) * m / denom

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step_count,
        }

    def load_state(self, meta: dict, m: list[np.ndarray], v: list[np.ndarray]) -> None:
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise ContractError("optimizer moment count mismatch")
        for p, mi, vi in zip(self.params, m, v):
            if mi.shape != p.shape or vi.shape != p.shape:
                raise ContractError("optimizer moment shape mismatch")
        self.lr = float(meta["lr"])
        self.betas = tuple(meta["betas"])
        self.eps = float(meta["eps"])
        self.weight_decay = float(meta["weight_decay"])
        self.step_count = int(meta["step"])
        self.m = [np.array(a, dtype=DTYPE, copy=True) for a in m]
        self.v = [np.array(a, dtype=DTYPE, copy=True) for a in v]


def ema_update(ema: Sequence[np.ndarray], params: Sequence[Tensor | np.ndarray], decay: float) -> None:
    """In place: ``ema <- decay * ema + (1 - decay) * param``."""
    if not 0.0 <= decay <= 1.0:
        raise ContractError(f"EMA decay must lie in [0, 1], got {decay}")
    if len(ema) != len(params):
        raise ContractError("EMA/parameter count mismatch")
    d = DTYPE(decay)
    for e, p in zip(ema, params):
        src = p.data if isinstance(p, Tensor) else p
        if e.shape != src.shape:
            raise ContractError(f"EMA shape {e.shape} != param shape {src.shape}")
        if decay == 1.0:
            continue
        if decay == 0.0:
            e[...] = src
            continue
        e *= d
        e += DTYPE(1.0 - decay) * src


def warmup_decay(decay: float, num_updates: int) -> float:
    """Latent-diffusion style EMA warm-up: ``min(decay, (1+n)/(10+n))``."""
    return min(decay, (1.0 + num_updates) / (10.0 + num_updates))
