"""Keyed random streams.

Every consumer draws from its own generator derived from ``(root seed,
stream id, step)``, so any stream can be recreated at any step without
replaying the others. That is what makes checkpoint resume bit-exact.
"""

from __future__ import annotations

import numpy as np

# Stream ids. Values are part of the reproducibility contract; do not renumber.
MASK = 1
INIT = 2
DATA = 3
SYNTH = 4
EVAL = 5


def stream(seed: int, stream_id: int, step: int = 0) -> np.random.Generator:
    if seed < 0 or stream_id < 0 or step < 0:
        raise ValueError("seed, stream id and step must be non-negative")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream_id, step))
    return np.random.Generator(np.random.PCG64(ss))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0, dtype=np.float64) -> np.ndarray:
    """Normal(0, std^2) truncated to [-bound*std, bound*std] by redrawing."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)
