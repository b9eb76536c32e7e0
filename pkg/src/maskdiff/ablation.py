"""Ablation harness: train/load one checkpoint per (arm, seed), roll out, compare drift."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Config
from .errors import ContractError, MissingCheckpointError
from .metrics import DriftReport, MaskTrend, drift_curve, mask_trend, psnr
from .rng import Rng
from .rollout import SamplerSettings, generate_videos
from .toyworld import ALL_PROMPTS, Corpus, ToyClip, corpus_digest, gen_clip
from .trainer import init_state, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

MODES = ("full", "no_mask", "zero_anchor", "no_noise_aug", "t_test_sweep")
MOVING_PROMPTS = tuple(p for p in ALL_PROMPTS if p != "still")


@dataclass(frozen=True)
class AblationSpec:
    mode: str
    t_values: tuple[int, ...] = (0, 100, 200, 400)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown ablation mode {self.mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class Arm:
    """One column of a comparison.

    ``train_tag`` names the checkpoint family; arms that only change inference
    (zero anchor, t_test) share the ``full`` checkpoints.
    """

    name: str
    train_tag: str = "full"
    train_overrides: tuple[tuple[str, object], ...] = ()
    zero_anchor: bool = False
    t_test: int | None = None

    def train_config(self, base: Config) -> Config:
        return base.replace(**dict(self.train_overrides))


FULL = Arm("full")
NO_MASK = Arm("no_mask", "no_mask", (("use_mask", False),))
ZERO_ANCHOR = Arm("zero_anchor", zero_anchor=True)
NO_NOISE_AUG = Arm("no_noise_aug", "no_noise_aug", (("t_max", 0),), t_test=0)


def arms_for(spec: AblationSpec) -> list[Arm]:
    if spec.mode == "full":
        return [FULL, Arm("full_repeat")]
    if spec.mode == "no_mask":
        return [FULL, NO_MASK]
    if spec.mode == "zero_anchor":
        return [FULL, ZERO_ANCHOR]
    if spec.mode == "no_noise_aug":
        return [FULL, NO_NOISE_AUG]
    return [Arm(f"t_test_{v}", t_test=int(v)) for v in spec.t_values]


def checkpoint_path(ckpt_dir: str | Path, arm: Arm, seed: int) -> Path:
    return Path(ckpt_dir) / f"{arm.train_tag}_seed{seed}.ckpt"


def train_arm(base: Config, arm: Arm, corpus: Corpus, seed: int, path: str | Path, log_path=None) -> Path:
    """Train ``arm`` from scratch for ``base.steps`` and save its checkpoint."""
    cfg = arm.train_config(base)
    state = init_state(cfg, seed)
    state.extra = {"corpus_sha256": corpus_digest(corpus), "seed": seed}
    train(state, corpus, cfg.steps, log_path)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, path)
    return Path(path)


def eval_clips(cfg: Config, n: int | None = None, length: int | None = None) -> list[ToyClip]:
    """Held-out ground-truth clips; prompts cycle over the moving prompts."""
    n = cfg.n_eval_clips if n is None else n
    length = cfg.eval_frames if length is None else length
    rng = Rng(cfg.seed).split("eval-clips")
    return [
        gen_clip(MOVING_PROMPTS[k % len(MOVING_PROMPTS)], length, cfg.latent_shape, rng.split(f"clip{k}"))
        for k in range(n)
    ]


@dataclass
class ArmResult:
    arm: str
    seed: int
    reports: list[DriftReport]
    trend: MaskTrend | None

    def drift_at(self, frame: int) -> float:
        return float(np.mean([r.mse[frame] for r in self.reports]))

    @property
    def mean_mse(self) -> np.ndarray:
        return np.mean([r.mse for r in self.reports], axis=0)


def evaluate(model, cfg: Config, clips: Sequence[ToyClip], seed: int, zero_anchor=False, t_test=None, arm="full") -> ArmResult:
    """Roll out every clip from its true first frame and score against the truth."""
    settings = SamplerSettings.from_config(cfg, **({} if t_test is None else {"t_test": t_test}))
    states = generate_videos(
        [c.prompt for c in clips],
        clips[0].frames.shape[0],
        model,
        settings,
        Rng(seed).split("eval"),
        firsts=[c.frames[0] for c in clips],
        zero_anchor=zero_anchor,
    )
    reports = [drift_curve(s, c.frames) for s, c in zip(states, clips)]
    traces = [t for s in states for t in s.traces if t is not None and len(t)]
    return ArmResult(arm, seed, reports, mask_trend(traces) if traces else None)


@dataclass
class AblationReport:
    spec: AblationSpec
    results: list[ArmResult] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def arm_mean(self, arm: str, frame: int) -> float:
        vals = [r.drift_at(frame) for r in self.results if r.arm == arm]
        if not vals:
            raise KeyError(arm)
        return float(np.mean(vals))

    def write(self, out_dir: str | Path, frame: int) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "drift_per_frame.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arm", "seed", "frame", "mse", "psnr"])
            for r in self.results:
                mse = r.mean_mse
                for i, v in enumerate(mse):
                    p = float(psnr(v))
                    w.writerow([r.arm, r.seed, i, f"{v:.8g}", f"{p:.6g}"])
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arm", "seed", f"drift_mse_frame{frame}", "drift_slope", "mask_first_decile", "mask_last_decile"])
            for r in self.results:
                slope = float(np.mean([d.slope for d in r.reports]))
                first = "" if r.trend is None else f"{r.trend.first_decile:.6g}"
                last = "" if r.trend is None else f"{r.trend.last_decile:.6g}"
                w.writerow([r.arm, r.seed, f"{r.drift_at(frame):.8g}", f"{slope:.6g}", first, last])
            for arm in dict.fromkeys(r.arm for r in self.results):
                w.writerow([arm, "mean", f"{self.arm_mean(arm, frame):.8g}", "", "", ""])


def run_ablation(
    spec: AblationSpec,
    cfg: Config,
    seeds: Sequence[int],
    ckpt_dir: str | Path,
    corpus: Corpus,
    out_dir: str | Path | None = None,
    train_missing: bool = False,
) -> AblationReport:
    """Evaluate every arm of ``spec`` for every seed.

    Checkpoints are looked up as ``<ckpt_dir>/<train_tag>_seed<k>.ckpt``; a
    missing one is an error unless ``train_missing`` is set.  All checkpoints
    must come from the same corpus and the same number of steps.
    """
    if not seeds:
        raise ContractError("at least one seed is required")
    digest = corpus_digest(corpus)
    clips = eval_clips(cfg)
    report = AblationReport(spec, provenance={"corpus_sha256": digest, "steps": set(), "seeds": list(seeds)})
    models: dict[tuple[str, int], object] = {}
    for arm in arms_for(spec):
        for seed in seeds:
            key = (arm.train_tag, seed)
            if key not in models:
                path = checkpoint_path(ckpt_dir, arm, seed)
                if not path.exists():
                    if not train_missing:
                        raise MissingCheckpointError(f"no checkpoint for arm {arm.name!r} seed {seed}: {path}")
                    log.info("training %s seed %d for %d steps", arm.train_tag, seed, cfg.steps)
                    train_arm(cfg, arm, corpus, seed, path)
                state = load_checkpoint(path, expect=arm.train_config(cfg))
                if state.extra.get("corpus_sha256") != digest:
                    raise ContractError(f"{path} was trained on a different corpus")
                report.provenance["steps"].add(state.step)
                models[key] = state.ema_model()
            log.info("evaluating %s seed %d", arm.name, seed)
            report.results.append(
                evaluate(models[key], cfg, clips, seed, arm.zero_anchor, arm.t_test, arm.name)
            )
    if len(report.provenance["steps"]) != 1:
        raise ContractError(f"arms were trained for different step counts: {sorted(report.provenance['steps'])}")
    if out_dir is not None:
        report.write(out_dir, cfg.eval_frames - 1)
    return report
