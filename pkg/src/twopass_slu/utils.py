"""Seeded randomness: every component draws from a named stream of one root seed."""

import hashlib
import random


def stream_seed(root_seed, name):
    """Stable 63-bit seed for a named sub-stream of a root seed."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def stream_rng(root_seed, name):
    """Independent RNG for a named sub-stream (corpus, init, dropout, ...)."""
    return random.Random(stream_seed(root_seed, name))
