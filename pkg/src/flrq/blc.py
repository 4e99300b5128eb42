"""Activation-aware scaling and the alternating low-rank/clip loop.

One layer is quantized by (1) deriving a per-channel scale from calibration
activations, (2) extracting a flexible-rank correction from the scaled
weights, (3) clip-searching and quantizing the remainder, then (4)
alternating: re-extract the correction from the dequantization residual,
re-search the clip threshold, re-quantize, always keeping the epoch with
the lowest calibration output error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .linalg import amax, fro_norm, svd_oracle, SVD_DIM_LIMIT
from .quantize import (
    DEFAULT_CLIP_GRID,
    DEFAULT_GROUP_SIZE,
    QuantizedTensor,
    clip,
    dequantize,
    quantize_matrix,
    search_clip,
)
from .rankselect import RankSelectionConfig, RankTrace, RankStep, qk, slope, select_rank
from .sketch import LowRankFactors

CHANNEL_MEAN_EPS = 1e-8


@dataclass
class CalibrationBatch:
    """Calibration activations (n x tokens) and their per-channel profile."""

    x: np.ndarray
    channel_mean_: np.ndarray
    floored_channels: int = 0

    @classmethod
    def from_activations(cls, x: np.ndarray) -> "CalibrationBatch":
        mean = channel_mean(x)
        floored = int(np.count_nonzero(mean <= CHANNEL_MEAN_EPS))
        return cls(x=np.asarray(x, dtype=np.float64), channel_mean_=mean, floored_channels=floored)


@dataclass(frozen=True)
class BlcConfig:
    rank_cfg: RankSelectionConfig
    epochs: int | None = None  # None: 20 at 2-bit, 1 at 3/4-bit
    alpha_exponent: float = 2.5
    clip_grid: tuple[float, ...] = DEFAULT_CLIP_GRID
    mode: str = "asymmetric"
    group_size: int = DEFAULT_GROUP_SIZE
    use_svd_init: bool = False
    alpha_override: np.ndarray | None = None  # bypass activation scaling (tests, ablations)

    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            if self.epochs < 1:
                raise ValueError("epochs must be >= 1")
            return self.epochs
        return 20 if self.rank_cfg.d == 2 else 1


@dataclass
class EpochRecord:
    epoch: int
    error: float
    p_clp: float
    rank: int


@dataclass
class QuantizedLayer:
    """Best decomposition found for one layer, with its optimization trace."""

    q: QuantizedTensor
    factors: LowRankFactors
    alpha: np.ndarray
    blc_trace: list[EpochRecord]
    best_epoch: int
    best_error: float
    wx_norm: float
    p_clp: float
    rank_trace: RankTrace
    warnings: list[str] = field(default_factory=list)

    @property
    def rel_error(self) -> float:
        return self.best_error / self.wx_norm if self.wx_norm > 0 else 0.0

    def reconstruct(self) -> np.ndarray:
        return dequantize(self.q) + self.factors.reconstruct()


def channel_mean(x: np.ndarray) -> np.ndarray:
    """Per-channel mean of column-normalized absolute activations.

    Each token (column) is scaled to unit L2 norm first; all-zero tokens are
    skipped. Entries are floored at a small epsilon so downstream scaling
    stays finite.
    """
    if x.size == 0:
        raise ValueError("activation matrix is empty")
    norms = np.linalg.norm(x, axis=0)
    live = norms > 0.0
    if not live.any():
        raise NumericalError("all calibration tokens are zero")
    normalized = np.abs(x[:, live]) / norms[live]
    return np.maximum(normalized.mean(axis=1), CHANNEL_MEAN_EPS)


def alpha(x_bar: np.ndarray, exponent: float = 2.5) -> np.ndarray:
    """Channel scaling x_bar^exponent / sqrt(max(x_bar) * min(x_bar))."""
    if (x_bar <= 0.0).any():
        raise ValueError("channel means must be strictly positive (floor them first)")
    return np.power(x_bar, exponent) / np.sqrt(x_bar.max() * x_bar.min())


def scaled_flr(
    w: np.ndarray, alpha_vec: np.ndarray, cfg: RankSelectionConfig
) -> tuple[LowRankFactors, RankTrace]:
    """Flexible-rank extraction on the channel-scaled weights.

    Columns of w are multiplied by alpha before selection; the inverse scale
    is folded into the right factor, so left @ right approximates w in the
    original space.
    """
    if alpha_vec.shape != (w.shape[1],):
        raise ValueError(f"alpha length {alpha_vec.shape} does not match input dim {w.shape[1]}")
    if (alpha_vec <= 0.0).any():
        raise ValueError("alpha must be strictly positive")
    if np.all(alpha_vec == 1.0):
        return select_rank(w, cfg)
    factors, trace = select_rank(w * alpha_vec, cfg)
    unscaled = LowRankFactors(
        left=factors.left,
        right=factors.right / alpha_vec,
        truncated=factors.truncated,
    )
    return unscaled, trace


def layer_error(
    w: np.ndarray, q: QuantizedTensor, factors: LowRankFactors, x: np.ndarray
) -> float:
    """||W X - (dequant(q) + left @ right) X||_F."""
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"activations {x.shape} do not conform to weights {w.shape}")
    if q.shape != w.shape:
        raise ValueError(f"quantized shape {q.shape} does not match weights {w.shape}")
    if factors.left.shape[0] != w.shape[0] or factors.right.shape[1] != w.shape[1]:
        raise ValueError("factor shapes do not match the weights")
    approx = dequantize(q) + factors.reconstruct()
    return fro_norm(w @ x - approx @ x)


def _svd_init(w: np.ndarray, alpha_vec: np.ndarray, cfg: RankSelectionConfig):
    """Rank selection replayed on exact SVD components of the scaled weights."""
    m, n = w.shape
    scaled = w * alpha_vec
    w0 = amax(scaled)
    if w0 == 0.0:
        raise NumericalError("cannot select a rank for a zero matrix")
    res = svd_oracle(scaled)
    envelope = w0
    history = [w0]
    trace = RankTrace()
    residual = scaled.copy()
    stop = None
    kept = 0
    max_rank = min(m, n)
    for r in range(1, max_rank + 1):
        left_r = res.u[:, r - 1] * res.singular_values[r - 1]
        residual = residual - np.outer(left_r, res.v[:, r - 1])
        envelope = min(envelope, amax(residual))
        history.append(envelope)
        q_val, k_val = qk(cfg.d, cfg.d_fp, m, n, r, w0, envelope)
        s = slope(history, cfg.slope_window)
        trace.steps.append(RankStep(r=r, amax=envelope, q=q_val, k=k_val, slope=s))
        if k_val >= q_val:
            stop = "budget_qk"
            break
        if k_val > 1.0 + cfg.x:
            stop = "memory_cap"
            break
        if s < cfg.t:
            stop = "slope"
            break
        kept = r
    trace.stop_reason = stop if stop is not None else "max_rank"
    trace.selected_rank = kept
    left, right = res.low_rank(kept)
    factors = LowRankFactors(left=left, right=right / alpha_vec)
    return factors, trace


def _clip_and_quantize(
    w_rest: np.ndarray, x: np.ndarray, cfg: BlcConfig
) -> tuple[QuantizedTensor, float]:
    d = cfg.rank_cfg.d
    if amax(w_rest) == 0.0:
        return quantize_matrix(w_rest, d, cfg.group_size, cfg.mode), 0.0
    found = search_clip(w_rest, x, d, cfg.group_size, cfg.clip_grid, cfg.mode)
    clipped = clip(w_rest, found.p_clp) if found.p_clp > 0 else w_rest
    return quantize_matrix(clipped, d, cfg.group_size, cfg.mode), found.p_clp


def flrq_layer(w: np.ndarray, calib: CalibrationBatch, cfg: BlcConfig) -> QuantizedLayer:
    """Quantize one layer with the full alternating pipeline."""
    epochs = cfg.resolved_epochs()
    x = calib.x
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"calibration {x.shape} does not conform to weights {w.shape}")
    warnings: list[str] = []
    if cfg.alpha_override is not None:
        alpha_vec = np.asarray(cfg.alpha_override, dtype=np.float64)
    else:
        alpha_vec = alpha(calib.channel_mean_, cfg.alpha_exponent)
    if calib.floored_channels:
        warnings.append(
            f"{calib.floored_channels} zero-activation channel(s) floored at {CHANNEL_MEAN_EPS}"
        )

    if cfg.use_svd_init and min(w.shape) <= SVD_DIM_LIMIT:
        factors, rank_trace = _svd_init(w, alpha_vec, cfg.rank_cfg)
    else:
        if cfg.use_svd_init:
            warnings.append(
                f"use_svd_init ignored: min(m, n) > {SVD_DIM_LIMIT}, sketch init used"
            )
        factors, rank_trace = scaled_flr(w, alpha_vec, cfg.rank_cfg)
    w_q, p_clp = _clip_and_quantize(w - factors.reconstruct(), x, cfg)

    wx_norm = fro_norm(w @ x)
    trace: list[EpochRecord] = []
    best: QuantizedLayer | None = None
    for epoch in range(1, epochs + 1):
        err = layer_error(w, w_q, factors, x)
        trace.append(EpochRecord(epoch=epoch, error=err, p_clp=p_clp, rank=factors.rank))
        if best is None or err < best.best_error:
            best = QuantizedLayer(
                q=w_q,
                factors=factors,
                alpha=alpha_vec,
                blc_trace=trace,
                best_epoch=epoch,
                best_error=err,
                wx_norm=wx_norm,
                p_clp=p_clp,
                rank_trace=rank_trace,
                warnings=warnings,
            )
        if epoch == epochs:
            break
        residual = w - dequantize(w_q)
        if amax(residual) == 0.0:
            # Quantization is already exact; no correction left to extract.
            factors = LowRankFactors.empty(*w.shape)
            rank_trace = RankTrace(stop_reason="max_rank", selected_rank=0)
        else:
            factors, rank_trace = scaled_flr(residual, alpha_vec, cfg.rank_cfg)
        w_q, p_clp = _clip_and_quantize(w - factors.reconstruct(), x, cfg)
    best.blc_trace = trace
    return best
