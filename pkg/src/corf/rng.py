"""Deterministic, splittable random streams.

Streams are counter-based (Philox) so a parent stream can hand out child
streams by label without consuming its own state; identical seed plus
identical call sequence gives a bit-identical value sequence.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _child_seed(seed: int, label) -> int:
    h = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(h[:8], "little")


class Rng:
    """Seeded random stream with deterministic splitting."""

    def __init__(self, seed: int, _state: dict | None = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))
        if _state is not None:
            self._gen.bit_generator.state = _state

    def split(self, label) -> "Rng":
        """Independent child stream; does not advance this stream."""
        return Rng(_child_seed(self.seed, label))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    # state round-trip for checkpoints
    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, blob: dict) -> "Rng":
        state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(blob["counter"], dtype=np.uint64),
                "key": np.array(blob["key"], dtype=np.uint64),
            },
            "buffer": np.array(blob["buffer"], dtype=np.uint64),
            "buffer_pos": blob["buffer_pos"],
            "has_uint32": blob["has_uint32"],
            "uinteger": blob["uinteger"],
        }
        return cls(blob["seed"], _state=state)
