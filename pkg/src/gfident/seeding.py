"""Named random substreams derived from one root seed.

Every stochastic choice in the pipeline (scenario excitation, dataset split,
optimizer restarts) draws from a generator obtained here, so a single root
seed pins the whole artifact tree.  Stream names are hashed with SHA-256 to
keep the derivation stable across platforms and releases.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream_seed(root_seed: int, name: str) -> int:
    """Stable 64-bit child seed for a named stream."""
    digest = hashlib.sha256(f"{int(root_seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named stream under the root seed."""
    return np.random.default_rng(substream_seed(root_seed, name))
