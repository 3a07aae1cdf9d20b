"""Named counter-based random streams.

One config seed governs everything random in a run (parameter init, data
generation, batch sampling). Each subsystem asks for a stream by name, so
adding a consumer never perturbs the draws of existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def named_stream(seed: int, name: str) -> np.random.Generator:
    """A Philox generator keyed by (seed, name); identical across runs."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), tag])))


def truncated_normal(rng: np.random.Generator, shape, std=0.02, bound=2.0):
    """Normal draws with tails clipped at ``bound`` standard deviations."""
    values = rng.normal(0.0, std, size=shape)
    return np.clip(values, -bound * std, bound * std).astype(np.float32)
