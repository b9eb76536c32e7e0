"""Synthetic latent videos: a Gaussian blob drifting on a torus.

The prompt fixes the blob velocity (direction token plus speed token, or
``still``), so prompt faithfulness can be checked by tracking the blob.
"""

from __future__ import annotations

import functools
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, CorruptFileError, VersionMismatchError
from .rng import Rng

VOCAB: tuple[str, ...] = ("<null>", "left", "right", "up", "down", "still", "slow", "fast")
TOKEN_IDS = {tok: i for i, tok in enumerate(VOCAB)}
NULL_ID = 0
PROMPT_LEN = 2

DIRECTIONS = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "up": (0.0, -1.0), "down": (0.0, 1.0)}
SPEEDS = {"slow": 0.5, "fast": 1.0}
RADIUS_RANGE = (1.5, 2.5)

ALL_PROMPTS: tuple[str, ...] = tuple(
    f"{d} {s}" for d in DIRECTIONS for s in SPEEDS
) + ("still",)

MAGIC = b"MDTOYCRP"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIII")  # magic, version, C, H, W, n_clips, n_dropped
_META = struct.Struct("<fffffQII")  # x0, y0, vx, vy, radius, seed, length, n_tokens


@dataclass
class ToyClip:
    frames: np.ndarray  # (L, C, H, W) float32
    prompt: str
    x0: float
    y0: float
    vx: float
    vy: float
    radius: float
    seed: int

    @property
    def prompt_ids(self) -> np.ndarray:
        return encode_prompt(self.prompt)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ToyClip):
            return NotImplemented
        return (
            self.prompt == other.prompt
            and (self.x0, self.y0, self.vx, self.vy, self.radius, self.seed)
            == (other.x0, other.y0, other.vx, other.vy, other.radius, other.seed)
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )


def tokenize(prompt: str | Sequence[str]) -> list[str]:
    toks = prompt.split() if isinstance(prompt, str) else list(prompt)
    for t in toks:
        if t not in TOKEN_IDS:
            raise ContractError(f"unknown prompt token {t!r}")
    return toks


def encode_prompt(prompt: str | Sequence[str]) -> np.ndarray:
    """Token ids padded with the null id to ``PROMPT_LEN``."""
    ids = [TOKEN_IDS[t] for t in tokenize(prompt)][:PROMPT_LEN]
    return np.array(ids + [NULL_ID] * (PROMPT_LEN - len(ids)), dtype=np.int64)


def decode_prompt(ids: Sequence[int]) -> str:
    return " ".join(VOCAB[i] for i in ids if i != NULL_ID)


def velocity(prompt: str | Sequence[str]) -> tuple[float, float]:
    toks = tokenize(prompt)
    if "still" in toks or not toks:
        return 0.0, 0.0
    dirs = [t for t in toks if t in DIRECTIONS]
    speeds = [t for t in toks if t in SPEEDS]
    if len(dirs) != 1:
        raise ContractError(f"prompt {prompt!r} needs exactly one direction token")
    speed = SPEEDS[speeds[0]] if speeds else SPEEDS["slow"]
    dx, dy = DIRECTIONS[dirs[0]]
    return dx * speed, dy * speed


def render_frame(cx: float, cy: float, radius: float, shape: tuple[int, int, int]) -> np.ndarray:
    """Wrapped Gaussian blob mapped to [-1, 1] (background -1, peak near 1)."""
    c, h, w = shape
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    dy = (ys - cy + h / 2) % h - h / 2
    dx = (xs - cx + w / 2) % w - w / 2
    g = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * radius**2))
    frame = (2.0 * g - 1.0).astype(np.float32)
    return np.broadcast_to(frame, (c, h, w)).copy()


def render_clip(x0, y0, vx, vy, radius, length, shape) -> np.ndarray:
    c, h, w = shape
    return np.stack(
        [render_frame((x0 + vx * i) % w, (y0 + vy * i) % h, radius, shape) for i in range(length)]
    )


def gen_clip(prompt: str, length: int, shape: tuple[int, int, int], rng: Rng) -> ToyClip:
    vx, vy = velocity(prompt)
    c, h, w = shape
    seed = int(rng.gen.integers(0, 2**63))
    x0 = float(np.float32(rng.uniform() * w))
    y0 = float(np.float32(rng.uniform() * h))
    lo, hi = RADIUS_RANGE
    radius = float(np.float32(lo + (hi - lo) * rng.uniform()))
    frames = render_clip(x0, y0, vx, vy, radius, length, shape)
    return ToyClip(frames, " ".join(tokenize(prompt)), x0, y0, float(vx), float(vy), radius, seed)


def continuation(clip: ToyClip, length: int) -> np.ndarray:
    """The ground-truth rollout from the clip's first frame for ``length`` frames."""
    return render_clip(clip.x0, clip.y0, clip.vx, clip.vy, clip.radius, length, clip.frames.shape[1:])


@functools.lru_cache(maxsize=None)
def _motion_scale(shape: tuple[int, int, int]) -> float:
    # fastest clip: top speed, widest blob, scores ~20
    frames = render_clip(0.0, 0.0, SPEEDS["fast"], 0.0, RADIUS_RANGE[1], 24, shape)
    return 19.5 / float(np.abs(np.diff(frames, axis=0)).mean())


def motion_score(clip: ToyClip | np.ndarray) -> float:
    frames = clip.frames if isinstance(clip, ToyClip) else np.asarray(clip)
    if frames.shape[0] < 2:
        raise ContractError("motion score needs at least two frames")
    scale = _motion_scale(tuple(frames.shape[1:]))
    return float(np.abs(np.diff(frames.astype(np.float64), axis=0)).mean() * scale)


def blob_track(frames: np.ndarray) -> np.ndarray:
    """Circular centre of mass per frame, (L, 2) as (x, y)."""
    frames = np.asarray(frames, dtype=np.float64)
    g = (frames.mean(axis=1) + 1.0) / 2.0  # (L, H, W)
    _, h, w = g.shape
    ax = 2 * np.pi * np.arange(w) / w
    ay = 2 * np.pi * np.arange(h) / h
    wx = g.sum(axis=1)  # (L, W)
    wy = g.sum(axis=2)  # (L, H)
    cx = np.arctan2(wx @ np.sin(ax), wx @ np.cos(ax)) % (2 * np.pi) * w / (2 * np.pi)
    cy = np.arctan2(wy @ np.sin(ay), wy @ np.cos(ay)) % (2 * np.pi) * h / (2 * np.pi)
    return np.stack([cx, cy], axis=1)


def mean_displacement(frames: np.ndarray) -> np.ndarray:
    """Mean per-frame blob displacement, wrapped to the torus."""
    track = blob_track(frames)
    _, _, h, w = np.asarray(frames).shape
    d = np.diff(track, axis=0)
    d[:, 0] = (d[:, 0] + w / 2) % w - w / 2
    d[:, 1] = (d[:, 1] + h / 2) % h - h / 2
    return d.mean(axis=0)


def prompt_faithful(clip: ToyClip, tol: float = 0.1) -> bool:
    """True when the tracked motion direction agrees with the prompt tokens."""
    dx, dy = mean_displacement(clip.frames)
    vx, vy = velocity(clip.prompt)
    if vx == 0.0 and vy == 0.0:
        return abs(dx) < tol and abs(dy) < tol
    if vx != 0.0:
        return np.sign(dx) == np.sign(vx) and abs(dy) < tol
    return np.sign(dy) == np.sign(vy) and abs(dx) < tol


# -- corpus -------------------------------------------------------------------------


@dataclass
class Corpus:
    shape: tuple[int, int, int]
    clips: list[ToyClip]
    n_dropped: int = 0
    scores: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clips)


def build_corpus(
    n_clips: int,
    bounds: tuple[float, float] = (1.0, 20.0),
    rng: Rng | None = None,
    length: int = 24,
    shape: tuple[int, int, int] = (1, 16, 16),
    path: str | Path | None = None,
    max_attempts_factor: int = 50,
) -> Corpus:
    """Draw random prompts/clips, keep those whose motion score is in ``bounds``.

    Candidates are generated until ``n_clips`` survive the filter.  Clip ``k``
    uses its own derived stream, so the corpus does not depend on batching.
    """
    if n_clips < 1:
        raise ContractError("n_clips must be >= 1")
    rng = rng or Rng(0)
    lo, hi = bounds
    kept: list[ToyClip] = []
    scores: list[float] = []
    dropped = 0
    k = 0
    while len(kept) < n_clips:
        if k >= max_attempts_factor * n_clips:
            raise ContractError(f"motion filter {bounds} rejected too many clips ({dropped} dropped)")
        crng = rng.split(f"clip{k}")
        prompt = ALL_PROMPTS[int(crng.integers(0, len(ALL_PROMPTS) - 1))]
        clip = gen_clip(prompt, length, shape, crng)
        score = motion_score(clip)
        k += 1
        if lo <= score <= hi:
            kept.append(clip)
            scores.append(score)
        else:
            dropped += 1
    corpus = Corpus(tuple(shape), kept, dropped, scores)
    if path is not None:
        write_corpus(corpus, path)
    return corpus


def encode_corpus(corpus: Corpus) -> bytes:
    c, h, w = corpus.shape
    parts = [_HEADER.pack(MAGIC, VERSION, c, h, w, len(corpus.clips), corpus.n_dropped)]
    for clip in corpus.clips:
        ids = [TOKEN_IDS[t] for t in tokenize(clip.prompt)]
        parts.append(
            _META.pack(clip.x0, clip.y0, clip.vx, clip.vy, clip.radius, clip.seed,
                       clip.frames.shape[0], len(ids))
        )
        parts.append(struct.pack(f"<{len(ids)}I", *ids))
        parts.append(clip.frames.astype("<f4").tobytes())
    return b"".join(parts)


def corpus_digest(corpus: Corpus) -> str:
    return hashlib.sha256(encode_corpus(corpus)).hexdigest()


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_bytes(encode_corpus(corpus))


def read_corpus(path: str | Path) -> Corpus:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise CorruptFileError(f"{path}: truncated corpus header")
    magic, version, c, h, w, n, dropped = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: not a corpus file")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: corpus version {version}, expected {VERSION}")
    off = _HEADER.size
    clips = []
    try:
        for _ in range(n):
            x0, y0, vx, vy, r, seed, length, ntok = _META.unpack_from(buf, off)
            off += _META.size
            ids = struct.unpack_from(f"<{ntok}I", buf, off)
            off += 4 * ntok
            count = length * c * h * w
            if off + 4 * count > len(buf):
                raise CorruptFileError(f"{path}: truncated frame data")
            frames = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32)
            off += 4 * count
            clips.append(
                ToyClip(frames.reshape(length, c, h, w), decode_prompt(ids), x0, y0, vx, vy, r, seed)
            )
    except struct.error as exc:
        raise CorruptFileError(f"{path}: truncated clip record") from exc
    if off != len(buf):
        raise CorruptFileError(f"{path}: {len(buf) - off} trailing bytes")
    return Corpus((c, h, w), clips, dropped, [motion_score(cl) for cl in clips])
