"""Counter-based random streams.

A stream is identified by ``(seed, stream_index, path)``; the generator behind
it is numpy's PCG64 seeded through ``SeedSequence(seed, spawn_key=(stream_index,
*path))``.  Two streams with the same identity always produce the same draws, so
parallel trials can each own a sub-stream and stay reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

_MAX_SEED = 2**64 - 1


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_index: int = 0
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) <= _MAX_SEED:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.stream_index < 0:
            raise ValueError("stream_index must be nonnegative")
        if any(k < 0 for k in self.path):
            raise ValueError("sub-stream keys must be nonnegative")

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(self.stream_index, *self.path))
        return np.random.Generator(np.random.PCG64(ss))

    def substream(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_index, self.path + tuple(int(k) for k in keys))


RngLike = Union[RngStream, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    """Accept either a stream (fresh generator each call) or a live generator."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")
