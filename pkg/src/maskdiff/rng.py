"""Seeded, splittable random streams on top of numpy's counter-based Philox."""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import DTYPE, Tensor


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """A Philox stream. ``split(name)`` derives an independent child stream.

    Children depend only on (seed, path of names), never on how much the
    parent has been consumed, so per-purpose streams (data, noise, dropout)
    stay aligned across runs that differ in one dimension only.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (_key(name),))

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(tuple(shape), dtype=DTYPE)

    def integers(self, low: int, high_inclusive: int, size=None):
        return self.gen.integers(low, high_inclusive, size=size, endpoint=True)

    def uniform(self, size=None):
        return self.gen.random(size)

    # checkpointing -------------------------------------------------------

    def get_state(self) -> dict:
        st = self.gen.bit_generator.state
        inner = st["state"]
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(v) for v in inner["counter"]],
            "key": [int(v) for v in inner["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        r = cls(state["seed"], tuple(state["path"]))
        r.gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return r


def randn(shape, rng: Rng) -> Tensor:
    """I.i.d. standard normal tensor drawn from ``rng``."""
    return Tensor(rng.normal(shape))
