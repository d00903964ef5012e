"""Seed handling: one root seed, named PCG64 sub-streams."""

from __future__ import annotations

import numpy as np

# Fixed stream tags, append-only so derived seeds stay stable.
STREAM_INIT = 0      # parameter initialization
STREAM_DATA = 1      # synthetic image/label generation
STREAM_NOISE = 2     # additive noise draws
STREAM_SHUFFLE = 3   # epoch shuffling
STREAM_AUGMENT = 4   # training-time augmentation coins
STREAM_CHECK = 5     # gradient-check probes
STREAM_EVAL = 6      # evaluation-side randomness (none today, reserved)


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Return the PCG64 generator for ``seed`` and a sub-stream ``path``.

    The same (seed, path) pair yields an identical, platform-independent
    sample stream; distinct paths are statistically independent. PCG64
    (NumPy's default bit generator) is the single generator algorithm used
    throughout the package.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
