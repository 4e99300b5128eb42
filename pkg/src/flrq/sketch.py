"""Rank-1 sketch extraction and greedy deflation.

A single extraction draws a Gaussian probe s, runs `it` rounds of power
iteration using only matrix-vector products, and returns a rank-1 pair
(left carries the magnitude, right is unit norm). Deflating repeatedly
builds a rank-r approximation without ever forming a full decomposition.

Randomness is a Philox counter-based stream, so results are bit-stable
for a fixed seed. Stream splitting across layers is by convention
``layer_seed = global_seed ^ layer_index``; the probe for each step fills
its n-by-1 column in element order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .linalg import fro_norm, gemv, gemv_t, rank1_subtract

MAX_PROBE_REDRAWS = 3

# Residual mass below this (relative to the input) counts as numerically zero.
RESIDUAL_FLOOR = 1e-13


@dataclass(frozen=True)
class SketchConfig:
    """Knobs for one extraction: power-iteration count, seed, reorthogonalization."""

    it: int = 2
    seed: int = 0
    reorthogonalize: bool = False

    def __post_init__(self):
        if self.it < 0:
            raise ValueError("power-iteration count must be >= 0")


@dataclass(frozen=True)
class Rank1Pair:
    left: np.ndarray  # length m, carries the magnitude
    right: np.ndarray  # length n, unit norm

    def reconstruct(self) -> np.ndarray:
        return np.outer(self.left, self.right)


@dataclass
class LowRankFactors:
    """Stacked rank-1 factors: left (m, r) times right (r, n)."""

    left: np.ndarray
    right: np.ndarray
    truncated: bool = False

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    @classmethod
    def empty(cls, m: int, n: int) -> "LowRankFactors":
        return cls(left=np.zeros((m, 0)), right=np.zeros((0, n)))

    @classmethod
    def from_pairs(cls, pairs: list[Rank1Pair], m: int, n: int, truncated: bool = False):
        if not pairs:
            return cls(left=np.zeros((m, 0)), right=np.zeros((0, n)), truncated=truncated)
        left = np.stack([p.left for p in pairs], axis=1)
        right = np.stack([p.right for p in pairs], axis=0)
        return cls(left=left, right=right, truncated=truncated)

    def reconstruct(self) -> np.ndarray:
        return self.left @ self.right


def make_rng(seed: int) -> np.random.Generator:
    """Philox stream for the given seed (64-bit, counter-based)."""
    return np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF))


def layer_seed(global_seed: int, layer_index: int) -> int:
    return (global_seed ^ layer_index) & 0xFFFFFFFFFFFFFFFF


def r1_step(a: np.ndarray, cfg: SketchConfig, rng: np.random.Generator) -> Rank1Pair:
    """Extract one rank-1 pair from ``a`` using 2*it + 2 matrix-vector products.

    The probe p = (A A^T)^it A s is built by alternating gemv/gemv_t calls;
    k = A^T p then gives left = (|k| / |p|^2) p and right = k / |k|.
    """
    n = a.shape[1]
    if fro_norm(a) == 0.0:
        raise NumericalError("nothing to sketch: matrix is zero")
    for _ in range(MAX_PROBE_REDRAWS + 1):
        s = rng.standard_normal(n)
        p = gemv(a, s)
        for _ in range(cfg.it):
            p = gemv(a, gemv_t(a, p))
        p_norm_sq = float(p @ p)
        if p_norm_sq > 0.0:
            break
    else:
        raise NumericalError("sketch probe collapsed after redraws")
    k = gemv_t(a, p)
    k_norm = float(np.sqrt(k @ k))
    left = (k_norm / p_norm_sq) * p
    right = k / k_norm
    return Rank1Pair(left=left, right=right)


def deflate(a: np.ndarray, r: int, cfg: SketchConfig) -> LowRankFactors:
    """Greedy rank-r approximation: r extractions, each subtracted in turn.

    Stops early with ``truncated=True`` if the residual becomes numerically
    zero. With ``cfg.reorthogonalize`` each new right vector is Gram-Schmidt
    orthogonalized against the prior ones and the left vector recomputed as
    the residual's projection onto it.
    """
    m, n = a.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank must be in [1, {min(m, n)}], got {r}")
    rng = make_rng(cfg.seed)
    floor = RESIDUAL_FLOOR * fro_norm(a)
    residual = a.copy()
    pairs: list[Rank1Pair] = []
    for _ in range(r):
        if fro_norm(residual) <= floor:
            return LowRankFactors.from_pairs(pairs, m, n, truncated=True)
        pair = r1_step(residual, cfg, rng)
        if cfg.reorthogonalize and pairs:
            pair = _reorthogonalize(pair, pairs, residual)
        residual = rank1_subtract(residual, pair.left, pair.right)
        pairs.append(pair)
    return LowRankFactors.from_pairs(pairs, m, n)


def _reorthogonalize(pair: Rank1Pair, prior: list[Rank1Pair], residual: np.ndarray) -> Rank1Pair:
    v = pair.right.copy()
    for q in prior:
        v -= (v @ q.right) * q.right
    nrm = float(np.sqrt(v @ v))
    if nrm <= 1e-12:
        # Direction already spanned; keep the raw pair rather than divide by ~0.
        return pair
    v /= nrm
    return Rank1Pair(left=gemv(residual, v), right=v)


def sketch_residual_report(a: np.ndarray, factors: LowRankFactors) -> float:
    """Frobenius norm of a minus the factor reconstruction."""
    m, n = a.shape
    if factors.left.shape[0] != m or factors.right.shape[1] != n:
        raise ValueError(
            f"factor shapes {factors.left.shape} x {factors.right.shape} "
            f"do not conform to matrix {a.shape}"
        )
    if factors.left.shape[1] != factors.right.shape[0]:
        raise ValueError("left/right factor ranks disagree")
    if factors.rank == 0:
        return fro_norm(a)
    return fro_norm(a - factors.reconstruct())
