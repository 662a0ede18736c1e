"""Deterministic derived random streams.

Every random draw in the package comes from a stream keyed by
(master seed, *path), where the path encodes what the stream is for,
e.g. ``stream(seed, PURPOSE_SCENE, attempt)`` or
``stream(seed, PURPOSE_SHIFT, kind, severity_key, frame)``.  Streams are
independent of the order in which they are created, so frames can be
generated in any order (or in parallel) with identical content.
"""

from __future__ import annotations

import numpy as np

# Stable numeric tags for stream purposes; never reorder, only append.
PURPOSE_MODEL_INIT = 1
PURPOSE_TRAIN_SHUFFLE = 2
PURPOSE_SCENE = 3
PURPOSE_SHIFT = 4
PURPOSE_AUGMENT = 5
PURPOSE_RESTORE = 6
PURPOSE_DATASET = 7


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for (seed, *path); same arguments, same stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *path: int) -> int:
    """Collapse a stream key to a plain integer seed (for APIs that take one)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
