"""Complementary patch masks: sampling, token removal/reinsertion, dual-branch
composition and coverage bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, InvariantError
from .tensor import Tensor, gather_rows, scatter_rows


def visible_count(n: int, ratio: float) -> int:
    """Patches kept by the adaptive branch: ``round(n * (1 - ratio))`` clamped to ``[1, n - 1]``.

    Rounds half up so the result does not depend on banker's rounding.
    """
    v = math.floor(n * (1.0 - ratio) + 0.5)
    return min(max(v, 1), n - 1)


@dataclass(frozen=True)
class MaskPair:
    """Two complementary binary patch masks; 1 marks a preserved patch."""

    n_patches: int
    mask_ratio: float
    adaptive_mask: np.ndarray
    evaluation_mask: np.ndarray

    def __post_init__(self):
        a, e = np.asarray(self.adaptive_mask), np.asarray(self.evaluation_mask)
        if a.shape != (self.n_patches,) or e.shape != (self.n_patches,):
            raise ConfigError(f"mask shapes {a.shape}, {e.shape} do not match {self.n_patches} patches")
        if not np.array_equal(a + e, np.ones(self.n_patches, dtype=a.dtype)):
            raise InvariantError("adaptive and evaluation masks are not complementary")

    @property
    def adaptive_visible(self) -> np.ndarray:
        return np.flatnonzero(self.adaptive_mask)

    @property
    def evaluation_visible(self) -> np.ndarray:
        return np.flatnonzero(self.evaluation_mask)


def sample_mask_pair(n: int, ratio: float, rng: np.random.Generator) -> MaskPair:
    """Draw one complementary pair.

    A single partial Fisher-Yates shuffle picks the adaptive branch's visible
    patches; the evaluation branch gets exactly the rest.
    """
    if n < 2:
        raise ConfigError(f"need at least 2 patches for a complementary pair, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    v = visible_count(n, ratio)
    perm = np.arange(n)
    picks = rng.integers(np.arange(v), n)
    for i, j in enumerate(picks.tolist()):
        perm[i], perm[j] = perm[j], perm[i]
    adaptive = np.zeros(n, dtype=np.int8)
    adaptive[perm[:v]] = 1
    return MaskPair(n, float(ratio), adaptive, (1 - adaptive).astype(np.int8))


def sample_mask_pairs(batch: int, n: int, ratio: float, rng: np.random.Generator) -> list[MaskPair]:
    return [sample_mask_pair(n, ratio, rng) for _ in range(batch)]


def stack_masks(pairs: list[MaskPair]) -> tuple[np.ndarray, np.ndarray]:
    """(B, n) adaptive and evaluation masks from a list of pairs."""
    return (
        np.stack([p.adaptive_mask for p in pairs]),
        np.stack([p.evaluation_mask for p in pairs]),
    )


def expand_mask(mask: np.ndarray, p: int) -> np.ndarray:
    """Nearest-neighbour expansion: every patch bit repeated ``p*p`` times (patch-major order)."""
    if p < 1:
        raise ConfigError(f"grid side must be >= 1, got {p}")
    return np.repeat(np.asarray(mask), p * p, axis=-1)


@dataclass
class TokenSet:
    """Visible token rows plus the patch indices needed to put them back.

    Batched sets carry ``tokens`` of shape (B, v*p*p, C) and ``indices`` of
    shape (B, v); unbatched ones drop the leading axis.
    """

    tokens: Tensor
    indices: np.ndarray
    p: int
    n: int

    @property
    def n_visible(self) -> int:
        return self.indices.shape[-1]


def mask_indices(mask: np.ndarray) -> np.ndarray:
    """Sorted preserved-patch indices, (v,) or (B, v). Every row must keep the same count."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ConfigError("masks must be binary")
    if mask.ndim == 1:
        return np.flatnonzero(mask)
    counts = mask.sum(axis=1)
    if (counts != counts[0]).any():
        raise ConfigError("every mask in a batch must preserve the same number of patches")
    return np.stack([np.flatnonzero(m) for m in mask])


def apply_mask(tokens: Tensor, mask: Union[np.ndarray, MaskPair], p: int) -> TokenSet:
    """Drop every token of every removed patch; surviving rows keep their order."""
    if isinstance(mask, MaskPair):
        mask = mask.adaptive_mask
    mask = np.asarray(mask)
    n = mask.shape[-1]
    batched = tokens.ndim == 3
    rows = tokens.shape[1] if batched else tokens.shape[0]
    if rows != n * p * p:
        raise ConfigError(f"sequence length {rows} != n * p^2 = {n * p * p}")
    if batched and mask.ndim == 1:
        mask = np.broadcast_to(mask, (tokens.shape[0], n))
    idx = mask_indices(mask)
    C = tokens.shape[-1]
    if batched:
        B = tokens.shape[0]
        blocks = tokens.reshape(B, n, p * p * C)
        kept = gather_rows(blocks, idx).reshape(B, idx.shape[1] * p * p, C)
    else:
        blocks = tokens.reshape(n, p * p * C)
        kept = gather_rows(blocks, idx).reshape(idx.shape[0] * p * p, C)
    return TokenSet(kept, idx, p, n)


def reassemble(ts: TokenSet, mask_token: Tensor, pos_embed) -> Tensor:
    """Full ``n``-row sequence: encoder rows at kept patches, ``mask_token`` elsewhere,
    then ``pos_embed`` added to every row."""
    if ts.p != 1:
        raise ConfigError(f"reassemble needs one token per patch, got grid side {ts.p}")
    idx = np.asarray(ts.indices)
    srt = np.sort(idx, axis=-1)
    if srt.shape[-1] > 1 and (np.diff(srt, axis=-1) == 0).any():
        raise InvariantError("duplicate patch indices in token set")
    C = ts.tokens.shape[-1]
    shape = (idx.shape[0], ts.n, C) if idx.ndim == 2 else (ts.n, C)
    template = Tensor(np.zeros(shape, dtype=ts.tokens.dtype)) + mask_token
    full = scatter_rows(ts.tokens, idx, template)
    return full + pos_embed


def _mask_like(mask: np.ndarray, ref_shape: tuple, batched: bool) -> np.ndarray:
    axis = 1 if batched else 0
    n = mask.shape[-1]
    rows = ref_shape[axis]
    if rows % n:
        raise ConfigError(f"{rows} rows cannot be split into {n} patches")
    m = np.repeat(mask, rows // n, axis=-1)
    return m.reshape(m.shape + (1,) * (len(ref_shape) - axis - 1))


def compose_reconstruction(A, E, mask: Union[np.ndarray, MaskPair]):
    """Merge the two branch outputs: ``A * evaluation_mask + E * adaptive_mask``.

    Each position is taken from the branch that did NOT see it. ``mask`` is the
    adaptive mask (or a pair), shape (n,) or (B, n); rows of ``A``/``E`` are
    patch-major along axis 0 (unbatched) or axis 1 (batched).
    """
    if isinstance(mask, MaskPair):
        mask = mask.adaptive_mask
    mask = np.asarray(mask)
    a_shape = A.shape
    if tuple(a_shape) != tuple(E.shape):
        raise ConfigError(f"branch outputs differ in shape: {a_shape} vs {E.shape}")
    batched = mask.ndim == 2
    if batched and mask.shape[0] != a_shape[0]:
        raise ConfigError("mask batch does not match outputs")
    dtype = A.dtype
    keep = _mask_like(mask, a_shape, batched).astype(dtype)
    drop = 1 - keep
    if isinstance(A, Tensor) or isinstance(E, Tensor):
        return A * drop + E * keep
    return np.asarray(A) * drop + np.asarray(E) * keep


# ---------------------------------------------------------------- coverage


@dataclass
class CoverageStats:
    """Per-patch counters accumulated over iterations.

    ``adaptive_counts`` counts how often a patch was masked for the adaptive
    branch; ``union_counts`` counts how often a patch was supervised by at
    least one branch's reconstruction.
    """

    n: int
    iterations: int = 0
    adaptive_counts: np.ndarray = field(default=None)
    union_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.adaptive_counts is None:
            self.adaptive_counts = np.zeros(self.n, dtype=np.int64)
        if self.union_counts is None:
            self.union_counts = np.zeros(self.n, dtype=np.int64)

    def add_pair(self, pair: MaskPair) -> None:
        if pair.n_patches != self.n:
            raise ConfigError(f"pair has {pair.n_patches} patches, stats track {self.n}")
        masked_a = 1 - pair.adaptive_mask
        masked_e = 1 - pair.evaluation_mask
        self.adaptive_counts += masked_a
        self.union_counts += masked_a | masked_e
        self.iterations += 1

    def add_single(self, mask: np.ndarray) -> None:
        """Single-branch random masking: only the masked patches are supervised."""
        mask = np.asarray(mask)
        if mask.shape != (self.n,):
            raise ConfigError(f"mask shape {mask.shape} != ({self.n},)")
        self.adaptive_counts += 1 - mask
        self.union_counts += 1 - mask
        self.iterations += 1


def coverage_accumulate(stats: CoverageStats, pair: MaskPair) -> CoverageStats:
    stats.add_pair(pair)
    return stats


def grid_shape(n: int) -> tuple[int, int]:
    side = math.isqrt(n)
    return (side, side) if side * side == n else (1, n)


def coverage_report(stats: CoverageStats) -> dict:
    rows, cols = grid_shape(stats.n)
    a = stats.adaptive_counts.astype(np.float64)
    u = stats.union_counts.astype(np.float64)
    ddof = 1 if stats.n > 1 else 0
    return {
        "iterations": stats.iterations,
        "grid": (rows, cols),
        "adaptive_grid": stats.adaptive_counts.reshape(rows, cols),
        "union_grid": stats.union_counts.reshape(rows, cols),
        "adaptive_mean": float(a.mean()),
        "adaptive_std": float(a.std(ddof=ddof)),
        "union_mean": float(u.mean()),
        "union_std": float(u.std(ddof=ddof)),
    }


def simulate_coverage(n: int, ratio: float, iters: int, rng: np.random.Generator, mode: str = "complementary") -> CoverageStats:
    """Accumulate ``iters`` masks under ``mode`` ('complementary' or 'random')."""
    stats = CoverageStats(n)
    for _ in range(iters):
        pair = sample_mask_pair(n, ratio, rng)
        if mode == "complementary":
            stats.add_pair(pair)
        elif mode == "random":
            stats.add_single(pair.adaptive_mask)
        else:
            raise ConfigError(f"unknown masking mode {mode!r}")
    return stats


def write_coverage_csv(path, stats: CoverageStats) -> None:
    rows, cols = grid_shape(stats.n)
    lines = ["patch_row,patch_col,adaptive_count,union_count"]
    for i in range(stats.n):
        r, c = divmod(i, cols)
        lines.append(f"{r},{c},{stats.adaptive_counts[i]},{stats.union_counts[i]}")
    Path(path).write_text("\n".join(lines) + "\n")


def heatmap_bytes(grid: np.ndarray) -> bytes:
    """Binary PGM (P5) with values min-max scaled to [0, 255]; a constant grid maps to 255."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi > lo:
        scaled = (g - lo) / (hi - lo) * 255.0
    else:
        scaled = np.full_like(g, 255.0 if hi > 0 else 0.0)
    pix = np.rint(scaled).astype(np.uint8)
    header = f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii")
    return header + pix.tobytes()


def write_pgm(path, grid: np.ndarray) -> None:
    Path(path).write_bytes(heatmap_bytes(grid))
