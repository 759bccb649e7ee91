"""Named, seeded random streams derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAM_NAMES = ("pretrain", "rollout", "promptmask", "interval", "continuation", "data", "eval")


def stream(master_seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; same (seed, name) gives the same stream."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(master_seed), spawn_key=(key,))))


class RngStreams:
    """Bundle of named streams with serializable state (for bit-exact resume)."""

    def __init__(self, master_seed: int, names=STREAM_NAMES):
        self.master_seed = int(master_seed)
        self._streams = {n: stream(self.master_seed, n) for n in names}

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._streams[name]

    def state(self) -> dict:
        return {n: g.bit_generator.state for n, g in self._streams.items()}

    def set_state(self, state: dict) -> None:
        for n, s in state.items():
            self._streams[n].bit_generator.state = s


def child(rng: np.random.Generator) -> np.random.Generator:
    """Fresh generator seeded by one draw from ``rng``."""
    return np.random.default_rng(int(rng.integers(0, 2**63 - 1)))
