"""Seed plumbing.

All randomness in the toolkit flows from one master seed through named
sub-streams, so that independent stages (scene placement, rendering of a
given view, each fit start, ...) draw from independent generators whose
output does not depend on evaluation order or parallel scheduling.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_key(label) -> int:
    digest = hashlib.blake2s(repr(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator for the sub-stream named by `labels` under `seed`.

    Identical (seed, labels) always yields an identical stream; distinct
    labels yield statistically independent streams.
    """
    entropy = [int(seed) & _MASK64] + [_label_key(l) for l in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))
