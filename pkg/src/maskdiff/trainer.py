"""Training loop, checkpoint format and the CSV training log."""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Config
from .denoiser import CondBatch, MaskedDenoiser, augment_batch, build_model, drop_batch, render, ConditionSet
from .errors import (
    ConfigMismatchError,
    ContractError,
    CorruptFileError,
    NonFiniteError,
    VersionMismatchError,
)
from .masked_noise import diffusion_loss
from .optim import AdamW, ema_update, warmup_decay
from .rng import Rng
from .rollout import select_train_anchor
from .schedule import NoiseSchedule, build_linear_schedule, forward_sample
from .toyworld import Corpus

log = logging.getLogger(__name__)

STREAMS = ("data", "noise", "aug", "dropout")


@dataclass
class TrainState:
    cfg: Config
    model: MaskedDenoiser
    opt: AdamW
    ema: list[np.ndarray]
    rngs: dict[str, Rng]
    step: int = 0
    extra: dict = field(default_factory=dict)  # free-form provenance, e.g. corpus digest
    schedule: NoiseSchedule = field(init=False)

    def __post_init__(self):
        self.schedule = build_linear_schedule(self.cfg.T, self.cfg.beta_start, self.cfg.beta_end)

    def ema_model(self) -> MaskedDenoiser:
        """A model instance carrying the EMA weights (used for sampling)."""
        m = build_model(self.cfg)
        for p, e in zip(m.parameters(), self.ema):
            p.data = e.copy()
        return m


def init_state(cfg: Config, seed: int | None = None) -> TrainState:
    seed = cfg.seed if seed is None else seed
    model = build_model(cfg, seed)
    opt = AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        weight_decay=cfg.weight_decay,
    )
    root = Rng(seed).split("train")
    rngs = {name: root.split(name) for name in STREAMS}
    return TrainState(cfg, model, opt, [p.data.copy() for p in model.parameters()], rngs)


# -- batch assembly -----------------------------------------------------------------


def sample_batch(corpus: Corpus, batch_size: int, window: int, rng: Rng) -> list[tuple[int, int, int]]:
    """``(clip, target, anchor)`` index triples; targets start at frame 1."""
    picks = []
    for _ in range(batch_size):
        c = int(rng.integers(0, len(corpus) - 1))
        length = corpus.clips[c].frames.shape[0]
        i = int(rng.integers(1, length - 1))
        picks.append((c, i, select_train_anchor(i, window, rng)))
    return picks


def assemble(corpus: Corpus, picks: Sequence[tuple[int, int, int]]) -> tuple[CondBatch, np.ndarray]:
    """Clean conditions and targets; frame ``i-2`` falls back to frame 0 at ``i = 1``."""
    conds, targets = [], []
    for c, i, a in picks:
        frames = corpus.clips[c].frames
        conds.append(
            ConditionSet(
                ref_prev=frames[i - 1],
                ref_prev2=frames[max(i - 2, 0)],
                anchor=frames[a],
                prompt=corpus.clips[c].prompt,
            )
        )
        targets.append(frames[i])
    return render(conds, corpus.shape), np.stack(targets)


def train_step(state: TrainState, corpus: Corpus, force_mask: float | None = None) -> tuple[float, float]:
    """One optimisation step on a fresh batch. Returns ``(loss, grad_norm)``."""
    cfg, s, r = state.cfg, state.schedule, state.rngs
    picks = sample_batch(corpus, cfg.batch_size, cfg.anchor_window, r["data"])
    cb, y0 = assemble(corpus, picks)
    b = len(picks)
    t = r["noise"].integers(1, cfg.T, size=b)
    eps = r["noise"].normal(y0.shape)
    t_aug = r["aug"].integers(0, cfg.t_max, size=b)
    cb = augment_batch(cb, t_aug, s, r["aug"], include_anchor=True)
    cb = drop_batch(cb, cfg.drop_rate, r["dropout"])
    y_t = forward_sample(y0, t, eps, s)

    state.opt.zero_grad()
    eps_hat, _ = state.model.eps_hat(cb, y_t, t, s, force_mask=force_mask)
    loss = diffusion_loss(eps_hat, eps)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss at step {state.step}: t={t.tolist()} t_aug={t_aug.tolist()}")
    loss.backward()
    grads = [p.grad for p in state.opt.params]
    gnorm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads if g is not None)))
    state.opt.step(grads)
    decay = warmup_decay(cfg.ema_decay, state.step) if cfg.ema_warmup else cfg.ema_decay
    ema_update(state.ema, state.opt.params, decay)
    state.step += 1
    return value, gnorm


def train(
    state: TrainState,
    corpus: Corpus,
    steps: int,
    log_path: str | Path | None = None,
    force_mask: float | None = None,
) -> list[float]:
    """Run ``steps`` more steps; appends ``step,loss,grad_norm,wall_time`` rows to ``log_path``."""
    if tuple(corpus.shape) != tuple(state.cfg.latent_shape):
        raise ContractError(f"corpus shape {corpus.shape} != model latent {state.cfg.latent_shape}")
    losses = []
    writer = None
    fh = None
    if log_path is not None:
        new = not Path(log_path).exists() or state.step == 0
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "loss", "grad_norm", "wall_time"])
    t0 = time.perf_counter()
    try:
        for _ in range(steps):
            loss, gnorm = train_step(state, corpus, force_mask)
            losses.append(loss)
            if writer is not None and (state.step % state.cfg.log_every == 0 or state.step == 1):
                writer.writerow([state.step, f"{loss:.6g}", f"{gnorm:.6g}", f"{time.perf_counter() - t0:.3f}"])
            if state.step % 500 == 0:
                log.info("step %d loss %.4f", state.step, loss)
    finally:
        if fh is not None:
            fh.close()
    return losses


# -- checkpoints --------------------------------------------------------------------

CKPT_MAGIC = b"MDMCKPT\x00"
CKPT_VERSION = 1
_PRE = struct.Struct("<8sI32sQ")  # magic, version, config hash, json length


def _arrays(state: TrainState) -> list[np.ndarray]:
    return (
        [p.data for p in state.model.parameters()]
        + list(state.ema)
        + list(state.opt.m)
        + list(state.opt.v)
    )


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    named = list(state.model.named_parameters())
    meta = {
        "config": state.cfg.to_text(),
        "step": state.step,
        "extra": state.extra,
        "params": [[name, list(p.shape)] for name, p in named],
        "optimizer": state.opt.state(),
        "rng": {k: v.get_state() for k, v in sorted(state.rngs.items())},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    body = _PRE.pack(CKPT_MAGIC, CKPT_VERSION, state.cfg.hash(), len(blob)) + blob
    body += b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in _arrays(state))
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path, expect: Config | None = None) -> TrainState:
    """Rebuild a training state. ``expect`` (if given) must hash equal to the saved config."""
    buf = Path(path).read_bytes()
    if len(buf) < _PRE.size + 4:
        raise CorruptFileError(f"{path}: truncated checkpoint")
    magic, version, chash, jlen = _PRE.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise CorruptFileError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CorruptFileError(f"{path}: checksum mismatch (truncated or corrupt)")
    try:
        meta = json.loads(buf[_PRE.size : _PRE.size + jlen])
    except ValueError as exc:
        raise CorruptFileError(f"{path}: unreadable header") from exc
    cfg = Config.from_text(meta["config"])
    if cfg.hash() != chash:
        raise CorruptFileError(f"{path}: stored config does not match its hash")
    if expect is not None and expect.hash() != chash:
        raise ConfigMismatchError(f"{path}: checkpoint was trained under a different config")
    if expect is not None:
        cfg = expect  # run-control keys (steps, ...) come from the caller
    state = init_state(cfg)
    names = [n for n, _ in state.model.named_parameters()]
    if names != [n for n, _ in meta["params"]]:
        raise CorruptFileError(f"{path}: parameter layout differs from the model")
    shapes = [tuple(s) for _, s in meta["params"]]
    n = len(shapes)
    arrays = []
    off = _PRE.size + jlen
    for shape in shapes * 4:
        count = int(np.prod(shape))
        if off + 4 * count > len(buf) - 4:
            raise CorruptFileError(f"{path}: truncated array data")
        arrays.append(np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape))
        off += 4 * count
    if off != len(buf) - 4:
        raise CorruptFileError(f"{path}: unexpected trailing bytes")
    for p, a in zip(state.model.parameters(), arrays[:n]):
        p.data = a.copy()
    state.ema = [a.copy() for a in arrays[n : 2 * n]]
    state.opt.load_state(meta["optimizer"], arrays[2 * n : 3 * n], arrays[3 * n :])
    state.rngs = {k: Rng.from_state(v) for k, v in meta["rng"].items()}
    state.step = int(meta["step"])
    state.extra = dict(meta.get("extra", {}))
    return state


def load_sampling_model(path: str | Path, use_ema: bool = True) -> tuple[Config, MaskedDenoiser]:
    state = load_checkpoint(path)
    return state.cfg, (state.ema_model() if use_ema else state.model)
