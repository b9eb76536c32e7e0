"""Flat ``key = value`` configuration.

Defaults follow the published training/inference profile wherever one is
given; desk-scale overrides (batch, learning rate, steps, widths) are the
values the model actually trains with on one CPU core.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

# keys that control how long/where a run goes rather than what is trained;
# they are excluded from the checkpoint config hash so a run can be extended
RUN_CONTROL_KEYS = frozenset({"steps", "log_every", "n_eval_clips", "eval_frames"})


@dataclass
class Config:
    # schedule
    T: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.0120
    sample_steps: int = 50
    # guidance and inference
    w_ref: float = 0.25
    w_anc: float = 0.25
    w_txt: float = 6.5
    t_test: int = 200
    augment_anchor_at_inference: bool = False
    clip_x0: float = 1.0  # 0 disables clamping of the predicted clean frame
    divergence_limit: float = 1e4
    # training
    t_max: int = 550
    drop_rate: float = 0.10
    anchor_window: int = 10
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 3000
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    log_every: int = 10
    seed: int = 0
    # model
    channels: int = 1
    height: int = 16
    width: int = 16
    stages: int = 3
    dyn_width: int = 16
    mask_width: int = 8
    norm_groups: int = 4
    adapter_kernel: int = 3
    use_mask: bool = True
    static_scaled: bool = False  # divide the static channel by lam_t
    # toy world
    clip_len: int = 24
    n_clips: int = 256
    motion_lo: float = 1.0
    motion_hi: float = 20.0
    # evaluation
    n_eval_clips: int = 8
    eval_frames: int = 17

    def validate(self) -> "Config":
        checks = [
            (self.T >= 1, "T >= 1"),
            (0 < self.beta_start <= self.beta_end < 1, "0 < beta_start <= beta_end < 1"),
            (1 <= self.sample_steps <= self.T, "1 <= sample_steps <= T"),
            (0 <= self.t_test <= self.T, "0 <= t_test <= T"),
            (0 <= self.t_max <= self.T, "0 <= t_max <= T"),
            (0.0 <= self.drop_rate <= 1.0, "drop_rate in [0, 1]"),
            (self.anchor_window >= 1, "anchor_window >= 1"),
            (0.0 <= self.ema_decay <= 1.0, "ema_decay in [0, 1]"),
            (self.lr > 0, "lr > 0"),
            (self.batch_size >= 1, "batch_size >= 1"),
            (self.steps >= 0, "steps >= 0"),
            (self.stages >= 1, "stages >= 1"),
            (self.height % 2 ** (self.stages - 1) == 0, "height divisible by 2**(stages-1)"),
            (self.width % 2 ** (self.stages - 1) == 0, "width divisible by 2**(stages-1)"),
            (self.adapter_kernel % 2 == 1, "adapter_kernel odd"),
            (self.clip_len >= 3, "clip_len >= 3"),
            (self.motion_lo <= self.motion_hi, "motion_lo <= motion_hi"),
        ]
        bad = [msg for ok, msg in checks if not ok]
        if bad:
            raise ConfigError("invalid config: " + "; ".join(bad))
        return self

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> bytes:
        """SHA-256 over every key that affects what is trained."""
        text = "\n".join(
            line for line in self.to_text().splitlines()
            if line.split(" = ")[0] not in RUN_CONTROL_KEYS
        )
        return hashlib.sha256(text.encode()).digest()

    @classmethod
    def from_text(cls, text: str) -> "Config":
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(types[key], val, key)
        return cls(**values).validate()

    @classmethod
    def from_file(cls, path: str | Path) -> "Config":
        return cls.from_text(Path(path).read_text())


def _coerce(kind: str, val: str, key: str):
    try:
        if kind == "bool":
            low = val.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(val)
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {kind}") from None
    return val


def published_profile() -> dict:
    """The published values this artifact keeps as defaults or documents."""
    return {
        "T": 1000,
        "beta_start": 0.00085,
        "beta_end": 0.0120,
        "sample_steps": 50,
        "w_ref": 0.25,
        "w_anc": 0.25,
        "w_txt": 6.5,
        "t_test": 200,
        "t_max": 550,
        "drop_rate": 0.10,
        "anchor_window": 10,
        "ema_decay": 0.9999,
        "lr": 1e-5,
        "batch_size": 480,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
    }
