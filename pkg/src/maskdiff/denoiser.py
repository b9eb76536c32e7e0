"""Conditional noise and mask networks.

Each head is a small U-Net: a 3-stage conv trunk whose encoder stages
receive additive features from a reference-frame adapter, and whose residual
blocks are modulated (scale and shift) by a vector that sums the step
embedding, the anchor encoding, the prompt embedding and learned null flags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import Config
from .errors import ContractError, NonFiniteError
from .masked_noise import approx_static, blend
from .nn import Conv2d, Embedding, GroupNorm, Linear, Module
from .rng import Rng
from .schedule import NoiseSchedule, forward_sample
from .tensor import DTYPE, Tensor
from .toyworld import NULL_ID, PROMPT_LEN, VOCAB, encode_prompt

MASK_EPS = 1e-6


# -- conditions ---------------------------------------------------------------------


@dataclass
class ConditionSet:
    """Conditions for one frame. ``None`` in a slot means the condition is dropped."""

    ref_prev: np.ndarray | None = None
    ref_prev2: np.ndarray | None = None
    anchor: np.ndarray | None = None
    prompt: str | None = None
    aug_level: int = 0

    def replace(self, **kw) -> "ConditionSet":
        return replace(self, **kw)


@dataclass
class CondBatch:
    """Rendered conditions for a batch: dropped slots are zeros plus a null flag."""

    refs: np.ndarray  # (B, 2C, H, W)
    anchor: np.ndarray  # (B, C, H, W)
    prompt_ids: np.ndarray  # (B, PROMPT_LEN)
    ref_null: np.ndarray  # (B,) bool
    anchor_null: np.ndarray
    prompt_null: np.ndarray
    aug_level: np.ndarray  # (B,) int

    def __len__(self) -> int:
        return self.refs.shape[0]

    @property
    def ref_prev(self) -> np.ndarray:
        c = self.refs.shape[1] // 2
        return self.refs[:, :c]

    def take(self, idx) -> "CondBatch":
        return CondBatch(*(getattr(self, f)[idx] for f in _COND_FIELDS))

    @staticmethod
    def cat(parts: Sequence["CondBatch"]) -> "CondBatch":
        return CondBatch(*(np.concatenate([getattr(p, f) for p in parts]) for f in _COND_FIELDS))

    def without(self, group: str) -> "CondBatch":
        """Copy with one condition group (``ref``, ``anchor`` or ``prompt``) nulled."""
        out = CondBatch(*(getattr(self, f).copy() for f in _COND_FIELDS))
        if group == "ref":
            out.refs[...] = 0.0
            out.ref_null[...] = True
        elif group == "anchor":
            out.anchor[...] = 0.0
            out.anchor_null[...] = True
        elif group == "prompt":
            out.prompt_ids[...] = NULL_ID
            out.prompt_null[...] = True
        else:
            raise ContractError(f"unknown condition group {group!r}")
        return out


_COND_FIELDS = ("refs", "anchor", "prompt_ids", "ref_null", "anchor_null", "prompt_null", "aug_level")


def render(conds: Sequence[ConditionSet], latent_shape: tuple[int, int, int]) -> CondBatch:
    c, h, w = latent_shape
    b = len(conds)
    refs = np.zeros((b, 2 * c, h, w), dtype=DTYPE)
    anchor = np.zeros((b, c, h, w), dtype=DTYPE)
    ids = np.full((b, PROMPT_LEN), NULL_ID, dtype=np.int64)
    ref_null = np.zeros(b, dtype=bool)
    anchor_null = np.zeros(b, dtype=bool)
    prompt_null = np.zeros(b, dtype=bool)
    aug = np.zeros(b, dtype=np.int64)
    for i, cs in enumerate(conds):
        for frame in (cs.ref_prev, cs.ref_prev2, cs.anchor):
            if frame is not None and tuple(np.shape(frame)) != (c, h, w):
                raise ContractError(f"condition frame shape {np.shape(frame)} != {latent_shape}")
        if cs.ref_prev is None:
            ref_null[i] = True
        else:
            refs[i, :c] = cs.ref_prev
            refs[i, c:] = cs.ref_prev if cs.ref_prev2 is None else cs.ref_prev2
        if cs.anchor is None:
            anchor_null[i] = True
        else:
            anchor[i] = cs.anchor
        if cs.prompt is None:
            prompt_null[i] = True
        else:
            ids[i] = encode_prompt(cs.prompt)
        aug[i] = cs.aug_level
    return CondBatch(refs, anchor, ids, ref_null, anchor_null, prompt_null, aug)


def drop_conditions(cond: ConditionSet, rate: float, rng: Rng) -> ConditionSet:
    """Null each group (reference pair, anchor, prompt) independently with prob ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"drop rate must lie in [0, 1], got {rate}")
    drop = rng.uniform(3) < rate
    out = cond.replace()
    if drop[0]:
        out = out.replace(ref_prev=None, ref_prev2=None)
    if drop[1]:
        out = out.replace(anchor=None)
    if drop[2]:
        out = out.replace(prompt=None)
    return out


def drop_batch(cb: CondBatch, rate: float, rng: Rng) -> CondBatch:
    """Batched ``drop_conditions`` on rendered conditions."""
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"drop rate must lie in [0, 1], got {rate}")
    drop = rng.uniform((len(cb), 3)) < rate
    out = CondBatch(*(getattr(cb, f).copy() for f in _COND_FIELDS))
    out.refs[drop[:, 0]] = 0.0
    out.ref_null |= drop[:, 0]
    out.anchor[drop[:, 1]] = 0.0
    out.anchor_null |= drop[:, 1]
    out.prompt_ids[drop[:, 2]] = NULL_ID
    out.prompt_null |= drop[:, 2]
    return out


def augment_conditions(
    cond: ConditionSet, t_aug: int, s: NoiseSchedule, rng: Rng, include_anchor: bool = True
) -> ConditionSet:
    """Noise every present conditioning frame to level ``t_aug`` and record the level."""
    t_aug = s.check_step(t_aug, allow_zero=True)
    if t_aug == 0:
        return cond.replace(aug_level=0)

    def noisy(frame):
        if frame is None:
            return None
        return forward_sample(frame, t_aug, rng.normal(np.shape(frame)), s)

    return cond.replace(
        ref_prev=noisy(cond.ref_prev),
        ref_prev2=noisy(cond.ref_prev2),
        anchor=noisy(cond.anchor) if include_anchor else cond.anchor,
        aug_level=t_aug,
    )


def augment_batch(cb: CondBatch, t_aug: np.ndarray, s: NoiseSchedule, rng: Rng, include_anchor: bool = True) -> CondBatch:
    """Batched augmentation with one level per sample; dropped (zero) slots stay zero."""
    t_aug = np.asarray(t_aug, dtype=np.int64)
    if t_aug.min() < 0 or t_aug.max() > s.T:
        raise ContractError("augmentation level out of range")
    out = CondBatch(*(getattr(cb, f).copy() for f in _COND_FIELDS))
    out.aug_level = t_aug.copy()
    ref_noise = rng.normal(cb.refs.shape)
    anc_noise = rng.normal(cb.anchor.shape)
    # level-0 rows and dropped slots are left untouched
    noisy_rows = t_aug > 0
    keep = noisy_rows & ~cb.ref_null
    out.refs[keep] = forward_sample(cb.refs[keep], t_aug[keep], ref_noise[keep], s)
    if include_anchor:
        keep = noisy_rows & ~cb.anchor_null
        out.anchor[keep] = forward_sample(cb.anchor[keep], t_aug[keep], anc_noise[keep], s)
    return out


# -- embeddings ---------------------------------------------------------------------


def embed_step(t, aug_level, dim: int, T_max: int = 1000) -> np.ndarray:
    """Sinusoidal embedding of the diffusion step plus that of the augmentation level.

    The level uses the (cos, sin) ordering and the step (sin, cos), so the
    sum is not symmetric in its two arguments.  Accepts scalars or arrays.
    """
    t = np.asarray(t, dtype=np.float64)
    a = np.asarray(aug_level, dtype=np.float64)
    if t.min() < 0 or t.max() > T_max or a.min() < 0 or a.max() > T_max:
        raise ContractError(f"step/level outside [0, {T_max}]")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    at = t[..., None] * freqs
    aa = a[..., None] * freqs
    emb = np.concatenate([np.sin(at) + np.cos(aa), np.cos(at) + np.sin(aa)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb.astype(DTYPE)


def _nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


# -- network pieces -----------------------------------------------------------------


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, c_dim: int, groups: int, rng: Rng):
        self.norm1 = GroupNorm(groups, c_in)
        self.conv1 = Conv2d(c_in, c_out, rng.split("conv1"))
        self.film = Linear(c_dim, 2 * c_out, rng.split("film"), scale=0.5)
        self.norm2 = GroupNorm(groups, c_out)
        self.conv2 = Conv2d(c_out, c_out, rng.split("conv2"), scale=0.5)
        self.skip = Conv2d(c_in, c_out, rng.split("skip"), k=1) if c_in != c_out else None
        self.c_out = c_out

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        ss = self.film(c)  # (B, 2*c_out)
        b = ss.shape[0]
        scale = ss[:, : self.c_out].reshape(b, 1, 1, self.c_out)
        shift = ss[:, self.c_out :].reshape(b, 1, 1, self.c_out)
        h = self.norm2(h) * (scale + 1.0) + shift
        h = self.conv2(T.silu(h))
        skip = x if self.skip is None else self.skip(x)
        return skip + h


class Adapter(Module):
    """Reference-pair encoder emitting one additive feature map per trunk stage."""

    def __init__(self, c_in: int, chans: Sequence[int], k: int, rng: Rng):
        self.inp = [
            Conv2d(c_in if i == 0 else chans[i - 1], ch, rng.split(f"in{i}"), k=k, stride=1 if i == 0 else 2)
            for i, ch in enumerate(chans)
        ]
        self.out = [Conv2d(ch, ch, rng.split(f"out{i}"), k=k) for i, ch in enumerate(chans)]

    def __call__(self, refs: Tensor) -> list[Tensor]:
        feats = []
        h = refs
        for conv_in, conv_out in zip(self.inp, self.out):
            h = conv_out(T.silu(conv_in(h)))
            feats.append(h)
        return feats

    def zero_(self) -> None:
        for conv in self.inp + self.out:
            conv.zero_()


class AnchorEncoder(Module):
    def __init__(self, c_in: int, width: int, c_dim: int, rng: Rng):
        self.conv1 = Conv2d(c_in, width, rng.split("c1"), stride=2)
        self.conv2 = Conv2d(width, 2 * width, rng.split("c2"), stride=2)
        self.proj = Linear(2 * width, c_dim, rng.split("proj"))

    def __call__(self, anchor: Tensor) -> Tensor:
        h = T.silu(self.conv2(T.silu(self.conv1(anchor))))
        return self.proj(h.mean(axis=(1, 2)))


class Head(Module):
    """One conditional U-Net (noise head or mask head)."""

    def __init__(self, cfg: Config, width: int, out_channels: int, rng: Rng):
        c = cfg.channels
        self.width = width
        self.T = cfg.T
        c_dim = 4 * width
        mults = [2**i for i in range(cfg.stages)]
        chans = [width * m for m in mults]
        self.chans = chans
        self.t_mlp1 = Linear(width, c_dim, rng.split("t1"))
        self.t_mlp2 = Linear(c_dim, c_dim, rng.split("t2"))
        self.anchor_enc = AnchorEncoder(c, width, c_dim, rng.split("anchor"))
        self.prompt_emb = Embedding(len(VOCAB), c_dim, rng.split("prompt"))
        flags = rng.split("null").normal((3, c_dim)) * 0.02
        self.null_ref = Tensor(flags[0], requires_grad=True)
        self.null_anchor = Tensor(flags[1], requires_grad=True)
        self.null_prompt = Tensor(flags[2], requires_grad=True)
        self.adapter = Adapter(2 * c, chans, cfg.adapter_kernel, rng.split("adapter"))
        self.conv_in = Conv2d(c, width, rng.split("conv_in"))
        self.down = [
            Conv2d(chans[i - 1], chans[i], rng.split(f"down{i}"), stride=2) for i in range(1, len(chans))
        ]
        self.enc = [ResBlock(ch, ch, c_dim, cfg.norm_groups, rng.split(f"enc{i}")) for i, ch in enumerate(chans)]
        self.dec = [
            ResBlock(chans[i + 1] + chans[i], chans[i], c_dim, cfg.norm_groups, rng.split(f"dec{i}"))
            for i in range(len(chans) - 1)
        ]
        self.norm_out = GroupNorm(cfg.norm_groups, width)
        self.conv_out = Conv2d(width, out_channels, rng.split("conv_out"), scale=0.5)

    def cond_vector(self, cb: CondBatch, t) -> Tensor:
        b = len(cb)
        t = np.broadcast_to(np.asarray(t), (b,))
        emb = Tensor(embed_step(t, cb.aug_level, self.width, self.T))
        c = self.t_mlp2(T.silu(self.t_mlp1(emb)))
        c = c + self.anchor_enc(Tensor(_nhwc(cb.anchor)))
        c = c + self.prompt_emb(cb.prompt_ids).sum(axis=1)
        for flag, vec in (
            (cb.ref_null, self.null_ref),
            (cb.anchor_null, self.null_anchor),
            (cb.prompt_null, self.null_prompt),
        ):
            if flag.any():
                c = c + Tensor(flag.astype(DTYPE)[:, None]) * vec
        return T.silu(c)

    def adapter_features(self, refs: np.ndarray) -> list[Tensor]:
        """Per-stage additive features (NHWC) from the channel-concatenated reference pair."""
        return self.adapter(Tensor(_nhwc(refs)))

    def __call__(self, y_t: Tensor, cb: CondBatch, t) -> Tensor:
        c = self.cond_vector(cb, t)
        feats = self.adapter_features(cb.refs)
        h = self.conv_in(y_t.transpose(0, 2, 3, 1))
        skips = []
        for i, block in enumerate(self.enc):
            if i > 0:
                h = self.down[i - 1](h)
            h = block(h, c) + feats[i]
            skips.append(h)
        for i in reversed(range(len(self.dec))):
            h = T.concat([T.upsample2x(h), skips[i]], axis=-1)
            h = self.dec[i](h, c)
        return self.conv_out(T.silu(self.norm_out(h))).transpose(0, 3, 1, 2)


@dataclass
class DenoiserOutput:
    dynamic: Tensor  # (B, C, H, W)
    mask: Tensor | None  # (B, 1, H, W) in (0, 1); None for the single-head variant


class MaskedDenoiser(Module):
    """Noise head plus (optionally) a narrower mask head with independent weights."""

    def __init__(self, cfg: Config, rng: Rng):
        self.cfg = cfg
        self.latent_shape = cfg.latent_shape
        self.dynamic = Head(cfg, cfg.dyn_width, cfg.channels, rng.split("dynamic"))
        self.mask = Head(cfg, cfg.mask_width, 1, rng.split("mask")) if cfg.use_mask else None
        self.calls = {"dynamic": 0, "mask": 0}

    @property
    def use_mask(self) -> bool:
        return self.mask is not None

    def _check_input(self, y_t, cb: CondBatch) -> Tensor:
        y_t = y_t if isinstance(y_t, Tensor) else Tensor(y_t)
        if y_t.shape[1:] != tuple(self.latent_shape) or y_t.shape[0] != len(cb):
            raise ContractError(f"y_t shape {y_t.shape} does not fit latent {self.latent_shape} x {len(cb)}")
        return y_t

    def predict(self, cb: CondBatch, y_t, t) -> DenoiserOutput:
        y_t = self._check_input(y_t, cb)
        dyn = self.dynamic(y_t, cb, t)
        self.calls["dynamic"] += len(cb)
        mask = None
        if self.mask is not None:
            mask = T.clip(T.sigmoid(self.mask(y_t, cb, t)), MASK_EPS, 1.0 - MASK_EPS)
            self.calls["mask"] += len(cb)
        return DenoiserOutput(dyn, mask)

    def static_noise(self, cb: CondBatch, y_t, t, s: NoiseSchedule):
        y = y_t.data if isinstance(y_t, Tensor) else y_t
        lam = None
        if self.cfg.static_scaled:
            lam = s.lam[np.broadcast_to(np.asarray(t), (len(cb),))].astype(DTYPE).reshape(-1, 1, 1, 1)
        return approx_static(cb.ref_prev, y, lam)

    def eps_hat(self, cb: CondBatch, y_t, t, s: NoiseSchedule, force_mask: float | None = None):
        """Blended noise prediction; returns ``(eps_hat, mask)``."""
        if force_mask is not None or self.mask is None:
            y_t = self._check_input(y_t, cb)
            dyn = self.dynamic(y_t, cb, t)
            self.calls["dynamic"] += len(cb)
            if force_mask is None:
                return dyn, None
            m = Tensor(np.full((len(cb), 1) + tuple(self.latent_shape[1:]), force_mask, dtype=DTYPE))
            return blend(m, Tensor(self.static_noise(cb, y_t, t, s)), dyn), m
        out = self.predict(cb, y_t, t)
        static = Tensor(self.static_noise(cb, y_t, t, s))
        return blend(out.mask, static, out.dynamic), out.mask


def build_model(cfg: Config, seed: int | None = None) -> MaskedDenoiser:
    return MaskedDenoiser(cfg, Rng(cfg.seed if seed is None else seed).split("init"))
