"""Auto-regressive video generation: bootstrap, sliding references, anchors, segments."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DivergenceError
from .rng import Rng
from .sampler import GuidanceScales, MaskTrace, sample_frame
from .schedule import NoiseSchedule, build_linear_schedule

from . import denoiser as _den


@dataclass
class RolloutState:
    frames: list[np.ndarray]
    anchor: np.ndarray
    prompt: str
    traces: list[MaskTrace | None] = field(default_factory=list)  # None for provided frames
    prompts: list[str] = field(default_factory=list)  # per-frame prompt

    def video(self) -> np.ndarray:
        return np.stack(self.frames)

    def frame_stats(self) -> list[dict]:
        rows = []
        for i, f in enumerate(self.frames):
            tr = self.traces[i] if i < len(self.traces) else None
            rows.append(
                {
                    "frame": i,
                    "mean": float(f.mean()),
                    "std": float(f.std()),
                    "absmax": float(np.abs(f).max()),
                    "mask_mean": float(np.mean(tr.mean)) if tr is not None and len(tr) else float("nan"),
                }
            )
        return rows


@dataclass
class SegmentPlan:
    segments: list[tuple[str, int]]

    def __post_init__(self):
        if not self.segments:
            raise ContractError("segment plan is empty")
        for prompt, n in self.segments:
            if n < 1:
                raise ContractError(f"segment {prompt!r} has frame_count {n} < 1")

    @classmethod
    def parse(cls, text: str) -> "SegmentPlan":
        segs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" not in line:
                raise ContractError(f"plan line {lineno}: expected 'frame_count<TAB>prompt'")
            count, prompt = line.split("\t", 1)
            segs.append((prompt.strip(), int(count)))
        return cls(segs)

    @classmethod
    def from_file(cls, path: str | Path) -> "SegmentPlan":
        return cls.parse(Path(path).read_text())


def select_train_anchor(target_index: int, window: int, rng: Rng) -> int:
    """Uniform frame index in ``[max(0, target - window), target - 1]``."""
    if target_index < 1:
        raise ContractError("target_index must be >= 1")
    return int(rng.integers(max(0, target_index - window), target_index - 1))


@dataclass
class SamplerSettings:
    schedule: NoiseSchedule
    n_steps: int = 50
    guidance: GuidanceScales | None = field(default_factory=GuidanceScales)
    t_test: int = 200
    augment_anchor: bool = False
    clip_x0: float | None = 1.0
    divergence_limit: float = 1e4

    @classmethod
    def from_config(cls, cfg, **overrides) -> "SamplerSettings":
        kw = dict(
            schedule=build_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end),
            n_steps=cfg.sample_steps,
            guidance=GuidanceScales(cfg.w_ref, cfg.w_anc, cfg.w_txt),
            t_test=cfg.t_test,
            augment_anchor=cfg.augment_anchor_at_inference,
            clip_x0=cfg.clip_x0 or None,
            divergence_limit=cfg.divergence_limit,
        )
        kw.update(overrides)
        return cls(**kw)


def _sample(model, conds, settings: SamplerSettings, rng: Rng):
    cb = _den.render(conds, model.latent_shape)
    return sample_frame(
        model, cb, settings.schedule, settings.n_steps, settings.guidance, rng,
        settings.clip_x0, settings.divergence_limit,
    )


def bootstrap_first_frame(prompt, model, settings: SamplerSettings, rng: Rng, provided=None):
    """Return ``provided`` untouched, else sample a frame with blank references and anchor."""
    if provided is not None:
        return provided, None
    frames, traces = _sample(model, [_den.ConditionSet(prompt=prompt)], settings, rng)
    return frames[0], traces[0]


def _continue(
    prompts: Sequence[str],
    histories: list[list[np.ndarray]],
    anchors: list[np.ndarray],
    n_new: int,
    model,
    settings: SamplerSettings,
    rng: Rng,
    traces: list[list],
    frame_prompts: list[list[str]],
) -> None:
    """Append ``n_new`` frames to each history in place (batched over videos)."""
    s = settings.schedule
    for _ in range(n_new):
        i = len(histories[0])
        frng = rng.split(f"frame{i}")
        conds = [
            _den.ConditionSet(ref_prev=h[-1], ref_prev2=h[-2] if len(h) >= 2 else h[-1], anchor=a, prompt=p)
            for h, a, p in zip(histories, anchors, prompts)
        ]
        cb = _den.render(conds, model.latent_shape)
        t_aug = np.full(len(conds), settings.t_test, dtype=np.int64)
        cb = _den.augment_batch(cb, t_aug, s, frng.split("aug"), include_anchor=settings.augment_anchor)
        try:
            frames, tr = sample_frame(
                model, cb, s, settings.n_steps, settings.guidance, frng.split("sample"),
                settings.clip_x0, settings.divergence_limit,
            )
        except DivergenceError as exc:
            exc.partial = {"frames": histories, "at_frame": i, **(exc.partial or {})}
            raise
        for h, t_list, fp, f, trace, p in zip(histories, traces, frame_prompts, frames, tr, prompts):
            h.append(f)
            t_list.append(trace)
            fp.append(p)


def generate_videos(
    prompts: Sequence[str],
    n_frames: int,
    model,
    settings: SamplerSettings,
    rng: Rng,
    firsts: Sequence[np.ndarray] | None = None,
    zero_anchor: bool = False,
) -> list[RolloutState]:
    """Batched ``generate_video``: one rollout per prompt, sharing the sampler loop."""
    if n_frames < 1:
        raise ContractError("n_frames must be >= 1")
    prompts = list(prompts)
    if firsts is None:
        cond0 = [_den.ConditionSet(prompt=p) for p in prompts]
        f0, tr0 = _sample(model, cond0, settings, rng.split("bootstrap"))
        histories = [[f] for f in f0]
        traces: list[list] = [[t] for t in tr0]
    else:
        histories = [[np.asarray(f, dtype=np.float32)] for f in firsts]
        traces = [[None] for _ in prompts]
    shape = histories[0][0].shape
    anchors = [np.zeros(shape, np.float32) if zero_anchor else h[0] for h in histories]
    fps = [[p] for p in prompts]
    _continue(prompts, histories, anchors, n_frames - 1, model, settings, rng, traces, fps)
    return [
        RolloutState(h, a, p, t, fp) for h, a, p, t, fp in zip(histories, anchors, prompts, traces, fps)
    ]


def generate_video(prompt, n_frames, model, settings, rng, first=None, zero_anchor=False) -> RolloutState:
    """Frame 0 from the bootstrap (or ``first``); every later frame conditions on the
    previous two frames (frame 0 duplicated at i=1), the fixed anchor and the prompt."""
    return generate_videos(
        [prompt], n_frames, model, settings, rng, None if first is None else [first], zero_anchor
    )[0]


def generate_multi_prompt(plan: SegmentPlan, model, settings: SamplerSettings, rng: Rng, first=None) -> RolloutState:
    """Chain segments; segment k+1 is anchored on the last frame of segment k.

    Segment 0 consumes ``rng`` exactly as ``generate_video`` would, so a
    one-segment plan reproduces it.
    """
    prompt0, n0 = plan.segments[0]
    state = generate_video(prompt0, n0, model, settings, rng, first=first)
    for k, (prompt, n) in enumerate(plan.segments[1:], start=1):
        history = list(state.frames)
        anchor = history[-1]
        traces = [list(state.traces)]
        fps = [list(state.prompts)]
        histories = [history]
        _continue([prompt], histories, [anchor], n, model, settings, rng.split(f"segment{k}"), traces, fps)
        state = RolloutState(histories[0], anchor, prompt, traces[0], fps[0])
    return state


# -- persistence --------------------------------------------------------------------


def save_rollout(state: RolloutState, out_dir: str | Path, gif: bool = True) -> None:
    """``frames.npy`` + ``frame_stats.csv`` + ``mask_trace.csv`` (+ ``rollout.gif``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "frames.npy", state.video().astype("<f4"))
    with open(out / "frame_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "prompt", "mean", "std", "absmax", "mask_mean"])
        for row, p in zip(state.frame_stats(), state.prompts):
            w.writerow([row["frame"], p, f"{row['mean']:.6g}", f"{row['std']:.6g}",
                        f"{row['absmax']:.6g}", f"{row['mask_mean']:.6g}"])
    with open(out / "mask_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "step_index", "t", "mean", "min", "max"])
        for i, tr in enumerate(state.traces):
            if tr is None:
                continue
            for k in range(len(tr)):
                w.writerow([i, k, tr.steps[k], f"{tr.mean[k]:.6g}", f"{tr.min[k]:.6g}", f"{tr.max[k]:.6g}"])
    if gif:
        write_gif(state.video(), out / "rollout.gif")


def write_gif(video: np.ndarray, path: str | Path, scale: int = 8) -> None:
    """8-bit grayscale GIF of the first channel, for eyeballing only."""
    from PIL import Image

    v = np.clip((np.asarray(video)[:, 0] + 1.0) * 127.5, 0, 255).astype(np.uint8)
    v = v.repeat(scale, axis=1).repeat(scale, axis=2)
    imgs = [Image.fromarray(f, mode="L") for f in v]
    imgs[0].save(path, save_all=True, append_images=imgs[1:], duration=125, loop=0)
