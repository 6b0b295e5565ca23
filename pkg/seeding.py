"""One 64-bit seed, split into independent named random streams."""
import hashlib

import numpy as np


def stream_key(name):
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(seed, name):
    """Generator for the purpose `name` ("data", "init", "smoothgrad", ...)."""
    sequence = np.random.SeedSequence(entropy=int(seed) & (2 ** 64 - 1), spawn_key=(stream_key(name),))
    return np.random.Generator(np.random.PCG64(sequence))
