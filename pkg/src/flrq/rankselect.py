"""Per-layer flexible rank selection.

The loop extracts rank-1 components from the running residual and keeps
them while the effective-bit gain q from the shrinking amax outpaces the
storage growth k of the factors, subject to a hard memory cap and a
flatness test on the amax curve. Because the sketch is randomized, the
amax used for q (and recorded in the trace) is the running minimum of the
observed values, which keeps the decision sequence monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .linalg import amax, fro_norm, rank1_subtract
from .sketch import LowRankFactors, Rank1Pair, SketchConfig, make_rng, r1_step

STOP_REASONS = ("budget_qk", "memory_cap", "slope", "max_rank")


@dataclass(frozen=True)
class RankSelectionConfig:
    d: int = 4  # target quantization bit width
    d_fp: int = 16  # storage width of the factors, bits
    x: float = 0.2  # cap on fractional model-size increase
    t: float = 1e-3  # slope threshold
    slope_window: int = 4
    it: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.d not in (2, 3, 4):
            raise ValueError(f"bit width must be 2, 3 or 4, got {self.d}")
        if self.d_fp not in (16, 32):
            raise ValueError(f"factor storage width must be 16 or 32, got {self.d_fp}")
        if self.x < 0.0:
            raise ValueError("memory cap x must be >= 0")
        if self.slope_window < 1:
            raise ValueError("slope window must be >= 1")
        if self.t < 0.0:
            raise ValueError("slope threshold must be >= 0")

    def sketch_config(self) -> SketchConfig:
        return SketchConfig(it=self.it, seed=self.seed)


@dataclass(frozen=True)
class RankStep:
    r: int
    amax: float  # monotone envelope of the residual amax
    q: float
    k: float
    slope: float


@dataclass
class RankTrace:
    steps: list[RankStep] = field(default_factory=list)
    stop_reason: str = ""
    selected_rank: int = 0

    def to_dict(self) -> dict:
        return {
            "stop_reason": self.stop_reason,
            "selected_rank": self.selected_rank,
            "steps": [
                {"r": s.r, "amax": s.amax, "q": s.q, "k": s.k, "slope": s.slope}
                for s in self.steps
            ],
        }


def qk(d: int, d_fp: int, m: int, n: int, r: int, w0: float, wr: float) -> tuple[float, float]:
    """Effective-bit gain q and storage growth k for keeping r factors.

    q = (d + log2(w0 / wr)) / d, k = 1 + d_fp * r * (m + n) / (d * m * n).
    A fully captured residual (wr <= 0) returns q = +inf.
    """
    if w0 <= 0.0:
        raise ValueError("original amax must be positive")
    if r < 0:
        raise ValueError("rank must be >= 0")
    k = 1.0 + (d_fp * r * (m + n)) / (d * m * n)
    if wr <= 0.0:
        return math.inf, k
    d_prime = math.log2(w0 / wr)
    q = (d + d_prime) / d
    return q, k


def slope(amax_history, window: int) -> float:
    """Windowed decrease of the amax curve, normalized by the original amax.

    Returns +inf while the history is shorter than window + 1 so the test
    can never stop the loop before enough points exist.
    """
    hist = list(amax_history)
    if not hist:
        raise ValueError("amax history is empty")
    a0 = hist[0]
    if a0 == 0.0:
        raise NumericalError("slope undefined: original amax is zero")
    if len(hist) < window + 1:
        return math.inf
    return (hist[-1 - window] - hist[-1]) / (window * a0)


def select_rank(w: np.ndarray, cfg: RankSelectionConfig) -> tuple[LowRankFactors, RankTrace]:
    """Run the flexible-rank loop on one layer.

    Extracts rank-1 pairs from the residual; a pair is kept only if, with it
    included, k < q, k <= 1 + x, and the amax slope is still >= t. The pair
    that triggers a stop is discarded, so rank 0 is a valid outcome.
    """
    m, n = w.shape
    w0 = amax(w)
    if w0 == 0.0:
        raise NumericalError("cannot select a rank for a zero matrix")
    rng = make_rng(cfg.seed)
    sketch_cfg = cfg.sketch_config()
    floor = 1e-13 * fro_norm(w)
    residual = w.copy()
    envelope = w0
    history = [w0]
    pairs: list[Rank1Pair] = []
    trace = RankTrace()
    max_rank = min(m, n)
    stop = None
    for r in range(1, max_rank + 1):
        if fro_norm(residual) <= floor:
            stop = "max_rank"  # residual exhausted: nothing left to extract
            break
        pair = r1_step(residual, sketch_cfg, rng)
        candidate = rank1_subtract(residual, pair.left, pair.right)
        envelope = min(envelope, amax(candidate))
        history.append(envelope)
        q, k = qk(cfg.d, cfg.d_fp, m, n, r, w0, envelope)
        s = slope(history, cfg.slope_window)
        trace.steps.append(RankStep(r=r, amax=envelope, q=q, k=k, slope=s))
        if k >= q:
            stop = "budget_qk"
            break
        if k > 1.0 + cfg.x:
            stop = "memory_cap"
            break
        if s < cfg.t:
            stop = "slope"
            break
        residual = candidate
        pairs.append(pair)
    trace.stop_reason = stop if stop is not None else "max_rank"
    trace.selected_rank = len(pairs)
    return LowRankFactors.from_pairs(pairs, m, n), trace
