"""Deterministic seed derivation.

Every random stream in the toolkit (parameter init per component, batch
sampling, validation split, trial sampling, label shuffling) gets its own
seed derived from the base seed and a string scope. This keeps streams
independent of each other: adding an auxiliary head must not shift the
extractor init or the batch order.
"""

import hashlib


def derive_seed(base_seed: int, *scope: str) -> int:
    """Derive a 63-bit seed from a base seed and a scope path."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base_seed)).encode())
    for part in scope:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little") & 0x7FFFFFFFFFFFFFFF
