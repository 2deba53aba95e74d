"""Deterministic named substreams derived from one root seed.

Every randomized stage draws its generator from substream(root, label) so
component reruns reproduce independently of execution order.
"""

from __future__ import annotations

import numpy as np


def child_seed_sequence(root_seed: int, label: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed)] + list(label.encode("utf-8")))


def substream(root_seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(child_seed_sequence(root_seed, label))


def child_seed(root_seed: int, label: str) -> int:
    return int(child_seed_sequence(root_seed, label).generate_state(1, dtype=np.uint64)[0])
