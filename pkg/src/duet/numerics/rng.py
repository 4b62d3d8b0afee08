"""Seeded, counter-based random streams.

Every stream is a Philox generator keyed by (seed, stream id), so substreams
are independent and stable under reordering: drawing from one stream never
perturbs another, and a stream can be reconstructed from its key alone.
Stream ids mix parent ids with child names via BLAKE2, so nested derivation
like ``rng.stream("train").stream(step)`` is collision-resistant.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _feed(h, name) -> None:
    if isinstance(name, bool):
        raise TypeError("stream names must be ints, strings, or tuples of those")
    if isinstance(name, (int, np.integer)):
        h.update(b"i" + (int(name) & _MASK64).to_bytes(8, "little"))
    elif isinstance(name, str):
        h.update(b"s" + name.encode("utf-8") + b"\x00")
    elif isinstance(name, tuple):
        h.update(b"t" + len(name).to_bytes(2, "little"))
        for part in name:
            _feed(h, part)
    else:
        raise TypeError(f"bad stream name {name!r}; use ints, strings, or tuples")


def _mix(parent_sid: int, name) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(parent_sid.to_bytes(8, "little"))
    _feed(h, name)
    return int.from_bytes(h.digest(), "little")


class Rng:
    """One independent random stream; derive substreams with ``stream()``."""

    def __init__(self, seed: int, _sid: int = 0):
        self.seed = int(seed) & _MASK64
        self.sid = int(_sid) & _MASK64
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.sid], dtype=np.uint64))
        self._gen = np.random.Generator(self._bitgen)

    def stream(self, name) -> "Rng":
        """Fresh independent substream keyed by (seed, mix(sid, name))."""
        return Rng(self.seed, _mix(self.sid, name))

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        # Draw at float64 so the value sequence is dtype-independent.
        out = self._gen.standard_normal(shape)
        return out.astype(dtype) if np.dtype(dtype) != np.float64 else out

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        """0/1 array; entries are 1 with probability p."""
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"bernoulli probability {p} outside [0, 1]")
        return (self._gen.random(shape) < p).astype(np.int64)

    def uniform_int(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers uniform over [low, high)."""
        if high <= low:
            raise ValueError(f"uniform_int: empty range [{low}, {high})")
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state_dict(self) -> dict:
        state = self._bitgen.state
        return {
            "seed": self.seed,
            "sid": self.sid,
            "counter": [int(x) for x in state["state"]["counter"]],
            "key": [int(x) for x in state["state"]["key"]],
            "buffer": [int(x) for x in state["buffer"]],
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    def load_state_dict(self, sd: dict) -> None:
        self.seed = int(sd["seed"])
        self.sid = int(sd["sid"])
        state = self._bitgen.state
        state["state"]["counter"] = np.array(sd["counter"], dtype=np.uint64)
        state["state"]["key"] = np.array(sd["key"], dtype=np.uint64)
        state["buffer"] = np.array(sd["buffer"], dtype=np.uint64)
        state["buffer_pos"] = sd["buffer_pos"]
        state["has_uint32"] = sd["has_uint32"]
        state["uinteger"] = sd["uinteger"]
        self._bitgen.state = state
