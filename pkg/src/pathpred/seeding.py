"""Deterministic random-stream derivation.

Every task in the pipeline gets its own generator derived from a master
seed plus a structured path (e.g. ``("evaluate", condition, config, traj,
rep)``). Hashing with sha256 keeps the derivation stable across processes
and platforms, unlike Python's salted ``hash``.
"""

import hashlib

import numpy as np


def derive_seed_sequence(master_seed: int, *path) -> np.random.SeedSequence:
    """Build a SeedSequence from a master seed and a task path."""
    digest = hashlib.sha256()
    digest.update(str(int(master_seed)).encode())
    for part in path:
        digest.update(b"\x1f")
        digest.update(str(part).encode())
    raw = digest.digest()
    entropy = [int.from_bytes(raw[i : i + 8], "little") for i in range(0, 32, 8)]
    return np.random.SeedSequence(entropy)


def derive_rng(master_seed: int, *path) -> np.random.Generator:
    """PCG64 generator for the task identified by ``path``."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(master_seed, *path)))
