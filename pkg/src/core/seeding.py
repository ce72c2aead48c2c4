"""
Seeded generator streams.

Every consumer of randomness draws from its own stream derived from the
experiment seed, so changing how one consumer uses randomness never shifts
another. Streams can be keyed further (e.g. by training iteration) which
lets an interrupted run resume without persisting generator state.
"""

from typing import Union

import numpy as np
import torch

STREAMS = {
    "init": 0,
    "batch": 1,
    "erosion": 2,
    "phi": 3,
    "probe": 4,
    "baseline": 5,
    "split": 6,
}


def seed_sequence(seed: int, stream: str, *keys: int) -> np.random.SeedSequence:
    """SeedSequence for ``(seed, stream, *keys)``."""
    if stream not in STREAMS:
        raise KeyError(f"Unknown generator stream: {stream}")
    return np.random.SeedSequence(
        entropy=int(seed),
        spawn_key=(STREAMS[stream], *(int(k) for k in keys)),
    )


def numpy_rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, stream, *keys)))


def torch_generator(seed: int, stream: str, *keys: int) -> torch.Generator:
    state = seed_sequence(seed, stream, *keys).generate_state(2, dtype=np.uint32)
    generator = torch.Generator()
    generator.manual_seed((int(state[0]) << 32) | int(state[1]))
    return generator


def as_torch_generator(rng: Union[torch.Generator, np.random.Generator, int]) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    if isinstance(rng, np.random.Generator):
        rng = int(rng.integers(0, 2**63 - 1))
    generator = torch.Generator()
    generator.manual_seed(int(rng))
    return generator
