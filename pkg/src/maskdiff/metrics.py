"""Drift and mask analytics plus the analytic multiply-accumulate estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import Config
from .errors import ContractError
from .sampler import MaskTrace

PEAK = 2.0  # toy frames live in [-1, 1]


@dataclass
class DriftReport:
    mse: np.ndarray  # (L,)
    psnr: np.ndarray  # (L,), inf where mse == 0
    slope: float  # least-squares slope of mse over frames >= 1

    def at(self, frame: int) -> float:
        return float(self.mse[frame])


def psnr(mse) -> np.ndarray:
    mse = np.asarray(mse, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(mse > 0, 10.0 * np.log10(PEAK**2 / np.where(mse > 0, mse, 1.0)), np.inf)


def drift_curve(generated, oracle) -> DriftReport:
    """Per-frame error of a rollout against the true continuation.

    ``generated`` and ``oracle`` are ``(L, C, H, W)`` arrays, or objects with
    ``video()`` / ``frames`` attributes.
    """
    g = _video(generated)
    o = _video(oracle)
    if g.shape != o.shape:
        raise ContractError(f"drift_curve: generated {g.shape} vs oracle {o.shape}")
    d = g.astype(np.float64) - o.astype(np.float64)
    mse = (d * d).reshape(len(d), -1).mean(axis=1)
    slope = 0.0
    if len(mse) >= 3:
        x = np.arange(1, len(mse), dtype=np.float64)
        slope = float(np.polyfit(x, mse[1:], 1)[0])
    return DriftReport(mse, psnr(mse), slope)


def _video(x) -> np.ndarray:
    if hasattr(x, "video"):
        return x.video()
    if hasattr(x, "frames"):
        return np.asarray(x.frames)
    return np.asarray(x)


@dataclass
class MaskTrend:
    per_step: np.ndarray  # mean mask per sampling step, averaged over frames
    first_decile: float
    last_decile: float

    @property
    def delta(self) -> float:
        return self.last_decile - self.first_decile

    @property
    def increasing(self) -> bool:
        return self.last_decile > self.first_decile


def mask_trend(traces: Sequence[MaskTrace | None]) -> MaskTrend:
    """Average the per-step means across frames; compare first vs last tenth of the steps."""
    traces = [t for t in traces if t is not None and len(t)]
    if not traces:
        raise ContractError("mask_trend needs at least one non-empty trace")
    n = len(traces[0])
    if any(len(t) != n for t in traces):
        raise ContractError("traces have different step counts")
    per_step = np.mean([t.mean for t in traces], axis=0)
    k = max(1, int(math.ceil(n / 10)))
    return MaskTrend(per_step, float(per_step[:k].mean()), float(per_step[-k:].mean()))


# -- multiply-accumulate estimate --------------------------------------------------


def _conv(h: int, w: int, cin: int, cout: int, k: int = 3, stride: int = 1) -> tuple[int, int, int]:
    ho = (h + 2 * (k // 2) - k) // stride + 1
    wo = (w + 2 * (k // 2) - k) // stride + 1
    return ho, wo, ho * wo * k * k * cin * cout


def head_macs(cfg: Config, width: int, out_channels: int, height: int | None = None, width_px: int | None = None) -> int:
    """Multiply-accumulates of one forward pass of one head on one sample."""
    c = cfg.channels
    h = cfg.height if height is None else height
    w = cfg.width if width_px is None else width_px
    c_dim = 4 * width
    chans = [width * 2**i for i in range(cfg.stages)]
    total = width * c_dim + c_dim * c_dim  # step MLP
    # anchor encoder
    h1, w1, m = _conv(h, w, c, width, stride=2)
    total += m
    _, _, m = _conv(h1, w1, width, 2 * width, stride=2)
    total += m + 2 * width * c_dim
    # adapter
    ka = cfg.adapter_kernel
    hh, ww, cin = h, w, 2 * c
    for i, ch in enumerate(chans):
        hh, ww, m = _conv(hh, ww, cin, ch, k=ka, stride=1 if i == 0 else 2)
        total += m + _conv(hh, ww, ch, ch, k=ka)[2]
        cin = ch
    # trunk
    sizes = []
    hh, ww = h, w
    total += _conv(hh, ww, c, width)[2]
    for i, ch in enumerate(chans):
        if i > 0:
            hh, ww, m = _conv(hh, ww, chans[i - 1], ch, stride=2)
            total += m
        total += _resblock(hh, ww, ch, ch, c_dim)
        sizes.append((hh, ww))
    for i in reversed(range(len(chans) - 1)):
        hh, ww = sizes[i]
        total += _resblock(hh, ww, chans[i + 1] + chans[i], chans[i], c_dim)
    total += _conv(h, w, width, out_channels)[2]
    return total


def _resblock(h: int, w: int, cin: int, cout: int, c_dim: int) -> int:
    m = _conv(h, w, cin, cout)[2] + c_dim * 2 * cout + _conv(h, w, cout, cout)[2]
    if cin != cout:
        m += _conv(h, w, cin, cout, k=1)[2]
    return m


@dataclass
class FlopsReport:
    dynamic_macs: int
    mask_macs: int
    per_eval: int  # both heads, one branch, one step
    per_step: int  # x 4 guidance branches
    per_frame: int  # x sampling steps
    per_16_frames: int

    def rows(self) -> list[tuple[str, int]]:
        return [(k, getattr(self, k)) for k in ("dynamic_macs", "mask_macs", "per_eval", "per_step", "per_frame", "per_16_frames")]


def flops_estimate(cfg: Config, height: int | None = None, width: int | None = None) -> FlopsReport:
    """Analytic multiply-accumulates for generating frames at the given latent size.

    The mask head contributes only when ``cfg.use_mask`` is set; elementwise
    work (norms, activations, blending) is not counted.
    """
    dyn = head_macs(cfg, cfg.dyn_width, cfg.channels, height, width)
    msk = head_macs(cfg, cfg.mask_width, 1, height, width) if cfg.use_mask else 0
    per_eval = dyn + msk
    per_step = 4 * per_eval
    per_frame = per_step * cfg.sample_steps
    return FlopsReport(dyn, msk, per_eval, per_step, per_frame, 16 * per_frame)
