import zlib

import numpy as np


def stream_key(label: str) -> int:
    """Stable 32-bit integer for a string label (image ids, stage names)."""
    return zlib.crc32(label.encode("utf-8"))


def seeded_rng(seed: int, stream_id=0) -> np.random.Generator:
    """Independent generator for ``(seed, stream_id)``.

    ``stream_id`` may be an int, a string or a tuple of those; equal
    arguments give identical sequences.
    """
    if not isinstance(stream_id, tuple):
        stream_id = (stream_id,)
    key = tuple(stream_key(s) if isinstance(s, str) else int(s) for s in stream_id)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
