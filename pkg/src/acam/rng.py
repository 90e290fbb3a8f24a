"""Seed derivation and the portable generator used across the package.

All randomness comes from ``numpy.random.Generator`` over the PCG64 bit
generator (PCG XSL RR 128/64), whose output stream is fixed across platforms.
Sub-seeds are derived from a root seed and a label path by SHA-256, so two
components never share a stream by accident.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    """64-bit seed = first 8 bytes (little-endian) of sha256("root/label1/label2/...")."""
    text = "/".join([str(int(root))] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def generator(root: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, *labels)))
