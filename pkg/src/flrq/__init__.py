"""Low-bit weight quantization with a flexible-rank full-precision residual.

The pipeline per layer: derive a channel scale from calibration
activations, extract a flexible-rank correction with a GEMV-only rank-1
sketch, clip-search and group-quantize the remainder, then alternate the
two halves keeping the epoch with the lowest calibration output error.
"""

from .blc import (
    BlcConfig,
    CalibrationBatch,
    QuantizedLayer,
    alpha,
    channel_mean,
    flrq_layer,
    layer_error,
    scaled_flr,
)
from .errors import (
    BadMagicError,
    BadVersionError,
    FlrqError,
    FormatError,
    NumericalError,
    TruncatedError,
)
from .linalg import SvdResult, amax, fro_norm, gemv, gemv_t, rank1_subtract, svd_oracle
from .quantize import (
    ClipSearchResult,
    QuantizedTensor,
    clip,
    dequantize,
    max_quant_error,
    quantize_matrix,
    search_clip,
)
from .rankselect import RankSelectionConfig, RankTrace, qk, select_rank, slope
from .sketch import (
    LowRankFactors,
    Rank1Pair,
    SketchConfig,
    deflate,
    layer_seed,
    make_rng,
    r1_step,
    sketch_residual_report,
)
from .synth import SynthSpec, gen_layer

__version__ = "0.1.0"
