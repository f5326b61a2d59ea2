"""Named random sub-streams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np
import torch

STREAMS = ("dataset", "init", "sampling", "eval")


def _key(name: str) -> int:
    return zlib.crc32(name.encode())


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` (and optional counters such as the step)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _key(name), *map(int, extra)]))


def torch_generator(seed: int, name: str, *extra: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed), _key(name), *map(int, extra)]).generate_state(2, np.uint64)
    return torch.Generator().manual_seed(int(state[0] >> np.uint64(1)))
