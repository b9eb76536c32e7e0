"""Command-line entry point: ``maskdiff [--config F] [--seed N] [--out DIR] <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation as abl
from .config import Config
from .errors import MaskDiffError, MissingCheckpointError
from .metrics import drift_curve, flops_estimate, mask_trend
from .rng import Rng
from .rollout import SamplerSettings, SegmentPlan, generate_multi_prompt, generate_videos, save_rollout
from .sampler import GuidanceScales
from .toyworld import build_corpus, corpus_digest, read_corpus
from .trainer import init_state, load_checkpoint, load_sampling_model, save_checkpoint, train

log = logging.getLogger("maskdiff")

EXIT_CODES = {
    "contract": 2,
    "config": 3,
    "config_mismatch": 3,
    "corrupt_file": 4,
    "version_mismatch": 4,
    "missing_checkpoint": 5,
    "io": 5,
    "non_finite": 6,
    "divergence": 6,
    "error": 1,
}


def _load_model(path: str, use_ema: bool = True):
    if not Path(path).exists():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    return load_sampling_model(path, use_ema)


def _settings(cfg: Config, args) -> SamplerSettings:
    g = GuidanceScales(
        cfg.w_ref if args.w_ref is None else args.w_ref,
        cfg.w_anc if args.w_anc is None else args.w_anc,
        cfg.w_txt if args.w_txt is None else args.w_txt,
    )
    return SamplerSettings.from_config(
        cfg,
        guidance=None if args.no_guidance else g,
        n_steps=cfg.sample_steps if args.steps is None else args.steps,
        t_test=cfg.t_test if args.t_test is None else args.t_test,
    )


def _first_frame(args):
    if args.first_from is None:
        return None
    corpus = read_corpus(args.first_from)
    return corpus.clips[args.clip].frames[0]


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(cfg: Config, args, out: Path) -> None:
    n = cfg.n_clips if args.n_clips is None else args.n_clips
    corpus = build_corpus(
        n, (cfg.motion_lo, cfg.motion_hi), Rng(cfg.seed).split("corpus"), cfg.clip_len, cfg.latent_shape,
        path=out / "corpus.bin",
    )
    with open(out / "corpus_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip", "prompt", "motion_score"])
        for k, (clip, score) in enumerate(zip(corpus.clips, corpus.scores)):
            w.writerow([k, clip.prompt, f"{score:.6g}"])
    print(f"kept {len(corpus)} clips, dropped {corpus.n_dropped} -> {out / 'corpus.bin'}")


def cmd_train(cfg: Config, args, out: Path) -> None:
    corpus = read_corpus(args.corpus)
    if args.resume:
        state = load_checkpoint(args.resume, expect=cfg)
    else:
        state = init_state(cfg, cfg.seed)
        state.extra = {"corpus_sha256": corpus_digest(corpus), "seed": cfg.seed}
    remaining = cfg.steps - state.step
    if remaining < 0:
        raise MaskDiffError(f"checkpoint already at step {state.step} > steps={cfg.steps}")
    train(state, corpus, remaining, out / "train_log.csv")
    save_checkpoint(state, out / "model.ckpt")
    print(f"trained to step {state.step} -> {out / 'model.ckpt'}")


def cmd_generate(cfg: Config, args, out: Path) -> None:
    _, model = _load_model(args.ckpt, not args.raw_weights)
    first = _first_frame(args)
    state = generate_videos(
        [args.prompt], args.frames, model, _settings(cfg, args), Rng(cfg.seed).split("generate"),
        None if first is None else [first], args.zero_anchor,
    )[0]
    save_rollout(state, out, gif=not args.no_gif)
    print(f"{len(state.frames)} frames -> {out}")


def cmd_rollout_multi(cfg: Config, args, out: Path) -> None:
    _, model = _load_model(args.ckpt, not args.raw_weights)
    plan = SegmentPlan.from_file(args.plan)
    state = generate_multi_prompt(plan, model, _settings(cfg, args), Rng(cfg.seed).split("multi"), _first_frame(args))
    save_rollout(state, out, gif=not args.no_gif)
    print(f"{len(state.frames)} frames over {len(plan.segments)} segments -> {out}")


def cmd_eval_drift(cfg: Config, args, out: Path) -> None:
    _, model = _load_model(args.ckpt, not args.raw_weights)
    clips = abl.eval_clips(cfg, args.n_clips, args.frames)
    states = generate_videos(
        [c.prompt for c in clips], clips[0].frames.shape[0], model, _settings(cfg, args),
        Rng(cfg.seed).split("eval"), firsts=[c.frames[0] for c in clips], zero_anchor=args.zero_anchor,
    )
    reports = [drift_curve(s, c.frames) for s, c in zip(states, clips)]
    with open(out / "drift.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip", "prompt", "frame", "mse", "psnr"])
        for k, (r, c) in enumerate(zip(reports, clips)):
            for i, (m, p) in enumerate(zip(r.mse, r.psnr)):
                w.writerow([k, c.prompt, i, f"{m:.8g}", f"{p:.6g}"])
    last = len(reports[0].mse) - 1
    print(f"mean drift MSE at frame {last}: {np.mean([r.mse[last] for r in reports]):.6g}")


def cmd_mask_stats(cfg: Config, args, out: Path) -> None:
    _, model = _load_model(args.ckpt, not args.raw_weights)
    if not model.use_mask:
        raise MaskDiffError("checkpoint has no mask head")
    clips = abl.eval_clips(cfg, args.n_clips, args.frames)
    states = generate_videos(
        [c.prompt for c in clips], clips[0].frames.shape[0], model, _settings(cfg, args),
        Rng(cfg.seed).split("mask-stats"), firsts=[c.frames[0] for c in clips],
    )
    traces = [t for s in states for t in s.traces if t is not None]
    trend = mask_trend(traces)
    with open(out / "mask_trend.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step_index", "t", "mean_mask"])
        for k, (t, m) in enumerate(zip(traces[0].steps, trend.per_step)):
            w.writerow([k, t, f"{m:.6g}"])
    print(
        f"first-decile mean {trend.first_decile:.4f}, last-decile mean {trend.last_decile:.4f}, "
        f"increasing={trend.increasing}"
    )


def cmd_ablate(cfg: Config, args, out: Path) -> None:
    spec = abl.AblationSpec(args.mode, tuple(args.t_values))
    report = abl.run_ablation(
        spec, cfg, args.seeds, args.ckpt_dir, read_corpus(args.corpus), out, train_missing=args.train_missing
    )
    frame = cfg.eval_frames - 1
    for arm in dict.fromkeys(r.arm for r in report.results):
        print(f"{arm}: mean drift MSE at frame {frame} = {report.arm_mean(arm, frame):.6g}")


def cmd_flops(cfg: Config, args, out: Path) -> None:
    rep = flops_estimate(cfg, args.height, args.width)
    with open(out / "flops.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "macs"])
        for k, v in rep.rows():
            w.writerow([k, v])
            print(f"{k}: {v}")


# -- parser -------------------------------------------------------------------------


def _sampling_flags(p: argparse.ArgumentParser, ckpt: bool = True) -> None:
    if ckpt:
        p.add_argument("--ckpt", required=True, help="checkpoint file")
        p.add_argument("--raw-weights", action="store_true", help="sample with raw instead of EMA weights")
    p.add_argument("--steps", type=int, help="sampling steps (default: config sample_steps)")
    p.add_argument("--t-test", type=int, help="reference noise level at inference")
    p.add_argument("--w-ref", type=float)
    p.add_argument("--w-anc", type=float)
    p.add_argument("--w-txt", type=float)
    p.add_argument("--no-guidance", action="store_true", help="evaluate only the full-condition branch")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maskdiff", description=__doc__)
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--out", default=".", help="output directory (created if missing)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build the toy corpus")
    p.add_argument("--n-clips", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train (or resume) a model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("generate", cmd_generate, "generate one video"),
        ("rollout-multi", cmd_rollout_multi, "generate a multi-prompt video from a plan file"),
    ):
        p = sub.add_parser(name, help=help_)
        _sampling_flags(p)
        p.add_argument("--first-from", help="corpus file supplying the first frame")
        p.add_argument("--clip", type=int, default=0)
        p.add_argument("--no-gif", action="store_true")
        if name == "generate":
            p.add_argument("--prompt", required=True)
            p.add_argument("--frames", type=int, default=16)
            p.add_argument("--zero-anchor", action="store_true")
        else:
            p.add_argument("--plan", required=True, help="lines of 'frame_count<TAB>prompt'")
        p.set_defaults(func=func)

    p = sub.add_parser("eval-drift", help="per-frame MSE/PSNR against the true continuation")
    _sampling_flags(p)
    p.add_argument("--n-clips", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--zero-anchor", action="store_true")
    p.set_defaults(func=cmd_eval_drift)

    p = sub.add_parser("mask-stats", help="mean mask value per sampling step")
    _sampling_flags(p)
    p.add_argument("--n-clips", type=int)
    p.add_argument("--frames", type=int)
    p.set_defaults(func=cmd_mask_stats)

    p = sub.add_parser("ablate", help="compare ablation arms across seeds")
    p.add_argument("--mode", required=True, choices=abl.MODES)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--t-values", type=int, nargs="+", default=[0, 100, 200, 400])
    p.add_argument("--train-missing", action="store_true", help="train arms whose checkpoint is absent")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("flops", help="analytic multiply-accumulate estimate")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_flops)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = Config.from_file(args.config) if args.config else Config()
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        args.func(cfg, args, out)
    except MaskDiffError as exc:
        return _fail(exc.category, exc)
    except OSError as exc:
        return _fail("io", exc)
    return 0


def _fail(category: str, exc: Exception) -> int:
    print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
    return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
