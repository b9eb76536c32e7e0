"""Per-frame generation with three-way classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import CondBatch, MaskedDenoiser
from .errors import ContractError, DivergenceError
from .rng import Rng
from .schedule import NoiseSchedule, ancestral_step, strided_steps
from .tensor import no_grad


@dataclass(frozen=True)
class GuidanceScales:
    w_ref: float = 0.25
    w_anc: float = 0.25
    w_txt: float = 6.5

    def __post_init__(self):
        if not all(np.isfinite([self.w_ref, self.w_anc, self.w_txt])):
            raise ContractError("guidance scales must be finite")

    @property
    def is_zero(self) -> bool:
        return self.w_ref == 0 and self.w_anc == 0 and self.w_txt == 0


@dataclass
class MaskTrace:
    """Full-condition mask statistics, one record per executed sampling step."""

    steps: list[int] = field(default_factory=list)
    mean: list[float] = field(default_factory=list)
    min: list[float] = field(default_factory=list)
    max: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def add(self, t: int, m: np.ndarray) -> None:
        self.steps.append(int(t))
        self.mean.append(float(m.mean()))
        self.min.append(float(m.min()))
        self.max.append(float(m.max()))


def cfg_compose(full, no_ref, no_anchor, no_text, g: GuidanceScales):
    """``full + w_ref (full - no_ref) + w_anc (full - no_anchor) + w_txt (full - no_text)``.

    Terms with a zero scale are skipped so the all-zero case returns ``full`` unchanged.
    """
    shapes = {np.shape(a) for a in (full, no_ref, no_anchor, no_text)}
    if len(shapes) != 1:
        raise ContractError(f"guidance branches disagree in shape: {shapes}")
    out = full
    for w, other in ((g.w_ref, no_ref), (g.w_anc, no_anchor), (g.w_txt, no_text)):
        if w != 0:
            out = out + w * (full - other)
    return out


def guidance_branches(cb: CondBatch) -> CondBatch:
    """Stack full / no-ref / no-anchor / no-text copies along the batch axis."""
    return CondBatch.cat([cb, cb.without("ref"), cb.without("anchor"), cb.without("prompt")])


def sample_frame(
    model: MaskedDenoiser,
    cb: CondBatch,
    s: NoiseSchedule,
    n_steps: int,
    g: GuidanceScales | None,
    rng: Rng,
    clip_x0: float | None = 1.0,
    divergence_limit: float = 1e4,
) -> tuple[np.ndarray, list[MaskTrace]]:
    """Denoise a batch of frames from pure noise.

    With non-zero scales ``g``, every step evaluates the model on the four
    guidance branches; ``g=None`` or all-zero scales evaluate only the
    full-condition branch.  Returns
    the frames ``(B, C, H, W)`` and one ``MaskTrace`` per frame.
    """
    if model is None:
        raise ContractError("sample_frame needs a model")
    if n_steps > s.T:
        raise ContractError(f"n_steps {n_steps} exceeds T={s.T}")
    b = len(cb)
    shape = (b,) + tuple(model.latent_shape)
    y = rng.normal(shape)
    steps = strided_steps(s.T, n_steps)
    traces = [MaskTrace() for _ in range(b)]
    # all-zero scales compose to the full-condition prediction, so skip the
    # ablated branches; this also keeps the result independent of batch layout
    guided = g is not None and not g.is_zero
    branches = guidance_branches(cb) if guided else cb
    with no_grad():
        for k, t in enumerate(steps):
            t_prev = steps[k + 1] if k + 1 < len(steps) else 0
            if guided:
                eps, mask = model.eps_hat(branches, np.concatenate([y] * 4), t, s)
                e = eps.data.reshape((4,) + shape)
                eps_comp = cfg_compose(e[0], e[1], e[2], e[3], g)
                mask_full = None if mask is None else mask.data[:b]
            else:
                eps, mask = model.eps_hat(cb, y, t, s)
                eps_comp = eps.data
                mask_full = None if mask is None else mask.data
            if mask_full is not None:
                for i in range(b):
                    traces[i].add(t, mask_full[i])
            noise = rng.normal(shape) if t_prev > 0 else None
            y = ancestral_step(y, eps_comp, t, t_prev, s, noise, clip_x0 or None)
            if not np.isfinite(y).all() or np.abs(y).max() > divergence_limit:
                raise DivergenceError(
                    f"sampling diverged at step {t} -> {t_prev} (max |y| = {np.nanmax(np.abs(y)):.3g})",
                    partial={"y": y, "t": t, "traces": traces},
                )
    return y, traces
