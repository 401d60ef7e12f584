"""Counter-based random streams.

Every random draw in the package comes from a Philox stream whose key is
derived from ``(seed, tag)`` and whose starting counter encodes up to three
integer indices (e.g. block and layer).  Two streams with different indices
never overlap, and the numbers a stream yields do not depend on which worker
consumes it or in which order.
"""
import zlib

import numpy as np

__all__ = ["stream", "tag_code"]


def tag_code(tag):
    """Stable 32-bit code for a purpose tag."""
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed, tag, *indices):
    """Return a ``numpy.random.Generator`` for ``(seed, tag, *indices)``.

    Parameters
    ----------
    seed : int
        Non-negative experiment seed.
    tag : str
        Purpose tag, e.g. ``"init"`` or ``"mask"``.
    *indices : int
        Up to three non-negative indices placed in the upper counter words.
    """
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    if len(indices) > 3:
        raise ValueError("at most three stream indices are supported")
    key = np.random.SeedSequence([seed, tag_code(tag)]).generate_state(2, dtype=np.uint64)
    counter = np.zeros(4, dtype=np.uint64)
    for pos, idx in enumerate(indices, start=1):
        if idx < 0:
            raise ValueError("stream indices must be non-negative")
        counter[pos] = idx
    return np.random.Generator(np.random.Philox(counter=counter, key=key))
