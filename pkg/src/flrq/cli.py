"""Command-line frontend.

Subcommands: gen-synth (make synthetic layers), quantize (full pipeline),
rank-sweep (rank vs amax/error curves), ablate (trend tables), compare-svd
(sketch vs exact truncation). Every command is deterministic for a fixed
--seed; --threads only changes wall time. Exit codes: 0 ok, 1 usage,
2 data/format, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as flrq_io
from .blc import BlcConfig, CalibrationBatch, QuantizedLayer, flrq_layer, layer_error
from .errors import FlrqError, FormatError, NumericalError
from .linalg import amax, fro_norm, svd_oracle
from .quantize import DEFAULT_CLIP_GRID, dequantize, quantize_matrix
from .rankselect import RankSelectionConfig, select_rank
from .sketch import LowRankFactors, SketchConfig, deflate, layer_seed, make_rng, r1_step
from .synth import FAMILIES, SynthSpec, gen_layer

ABLATIONS = ("it", "blc", "x", "fixed-vs-flex")

WEIGHTS_FILE = "weights.flrqten"
ACTIVATIONS_FILE = "activations.flrqten"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _log(msg: str) -> None:
    print(f"[flrq] {msg}", file=sys.stderr)


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("FLRQ_SEED")
    return int(env) if env else 0


def _parse_grid(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise UsageError(f"bad clip grid {text!r}: {exc}") from None


def build_parser() -> _Parser:
    p = _Parser(prog="flrq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="global seed (env FLRQ_SEED fallback)")
        sp.add_argument("--out-dir", type=Path, default=Path("flrq_out"))
        sp.add_argument("--threads", type=int, default=1,
                        help="worker threads for per-layer jobs (never changes output bytes)")

    g = sub.add_parser("gen-synth", help="generate synthetic layers")
    common(g)
    g.add_argument("--family", choices=FAMILIES, default="gaussian")
    g.add_argument("--m", type=int, default=64)
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--tokens", type=int, default=64)
    g.add_argument("--layers", type=int, default=1)
    g.add_argument("--nu", type=float, default=3.0)
    g.add_argument("--outlier-count", type=int, default=4)
    g.add_argument("--outlier-boost", type=float, default=10.0)
    g.add_argument("--f32", action="store_true", help="store weights/activations as f32")

    q = sub.add_parser("quantize", help="quantize a directory of layers")
    common(q)
    q.add_argument("--in", dest="in_dir", type=Path, required=True)
    q.add_argument("--d", type=int, default=4, choices=(2, 3, 4))
    q.add_argument("--d-fp", type=int, default=16, choices=(16, 32))
    q.add_argument("--group-size", type=int, default=128)
    q.add_argument("--x", type=float, default=0.2)
    q.add_argument("--t", type=float, default=1e-3)
    q.add_argument("--slope-window", type=int, default=4)
    q.add_argument("--it", type=int, default=2)
    q.add_argument("--epochs", type=int, default=None)
    q.add_argument("--alpha-exponent", type=float, default=2.5)
    q.add_argument("--clip-grid", type=str, default=",".join(str(v) for v in DEFAULT_CLIP_GRID))
    q.add_argument("--mode", choices=("symmetric", "asymmetric"), default="asymmetric")

    r = sub.add_parser("rank-sweep", help="rank vs amax/error curves for one layer")
    common(r)
    r.add_argument("--in", dest="in_dir", type=Path, required=True)
    r.add_argument("--max-rank", type=int, default=32)
    r.add_argument("--it", type=int, default=2)
    r.add_argument("--d", type=int, default=4, choices=(2, 3, 4))
    r.add_argument("--group-size", type=int, default=128)
    r.add_argument("--mode", choices=("symmetric", "asymmetric"), default="asymmetric")

    a = sub.add_parser("ablate", help="run one of the trend ablations")
    common(a)
    a.add_argument("--which", type=str, required=True)
    a.add_argument("--layers", type=int, default=4)
    a.add_argument("--m", type=int, default=128)
    a.add_argument("--n", type=int, default=128)
    a.add_argument("--tokens", type=int, default=64)
    a.add_argument("--d", type=int, default=3, choices=(2, 3, 4))
    a.add_argument("--family", choices=FAMILIES, default="outlier_channels")
    a.add_argument("--outlier-count", type=int, default=4)
    a.add_argument("--outlier-boost", type=float, default=10.0)

    c = sub.add_parser("compare-svd", help="exact truncation vs sketch deflation on one layer")
    common(c)
    c.add_argument("--in", dest="in_dir", type=Path, required=True)
    c.add_argument("--rank", type=int, default=16)
    c.add_argument("--it", type=int, default=2)
    c.add_argument("--seeds", type=int, default=10)
    return p


# --- layer I/O helpers --------------------------------------------------------


def _write_layer_inputs(directory: Path, w, x, f32: bool = False) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    flrq_io.write_container_file(directory / WEIGHTS_FILE, flrq_io.container_from_array(w, f32=f32))
    flrq_io.write_container_file(
        directory / ACTIVATIONS_FILE, flrq_io.container_from_array(x, f32=f32)
    )


def _read_layer_inputs(directory: Path):
    wpath = directory / WEIGHTS_FILE
    xpath = directory / ACTIVATIONS_FILE
    if not wpath.exists() or not xpath.exists():
        raise FormatError(f"{directory} does not contain {WEIGHTS_FILE} + {ACTIVATIONS_FILE}")
    w = flrq_io.read_container_file(wpath).to_array()
    x = flrq_io.read_container_file(xpath).to_array()
    return w, x


def _discover_layers(in_dir: Path) -> list[Path]:
    if (in_dir / WEIGHTS_FILE).exists():
        return [in_dir]
    layers = sorted(p for p in in_dir.glob("layer_*") if p.is_dir())
    if not layers:
        raise FormatError(f"no layer_* directories under {in_dir}")
    return layers


# --- subcommands --------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    seed = _resolve_seed(args.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for idx in range(args.layers):
        spec = SynthSpec(
            m=args.m,
            n=args.n,
            family=args.family,
            seed=layer_seed(seed, idx),
            tokens=args.tokens,
            nu=args.nu,
            outlier_count=args.outlier_count,
            outlier_boost=args.outlier_boost,
        )
        w, calib = gen_layer(spec)
        layer_dir = args.out_dir / f"layer_{idx:03d}"
        _write_layer_inputs(layer_dir, w, calib.x, f32=args.f32)
        (layer_dir / "synth.json").write_text(
            json.dumps(
                {
                    "family": spec.family,
                    "m": spec.m,
                    "n": spec.n,
                    "tokens": spec.tokens,
                    "seed": spec.seed,
                    "nu": spec.nu,
                    "outlier_count": spec.outlier_count,
                    "outlier_boost": spec.outlier_boost,
                },
                indent=2,
            )
            + "\n"
        )
    _log(f"wrote {args.layers} synthetic layer(s) to {args.out_dir}")
    return 0


def _blc_config(args, seed: int) -> BlcConfig:
    rank_cfg = RankSelectionConfig(
        d=args.d,
        d_fp=args.d_fp,
        x=args.x,
        t=args.t,
        slope_window=args.slope_window,
        it=args.it,
        seed=seed,
    )
    return BlcConfig(
        rank_cfg=rank_cfg,
        epochs=args.epochs,
        alpha_exponent=args.alpha_exponent,
        clip_grid=_parse_grid(args.clip_grid),
        mode=args.mode,
        group_size=args.group_size,
    )


def cmd_quantize(args) -> int:
    seed = _resolve_seed(args.seed)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    layers = _discover_layers(args.in_dir)
    inputs = [_read_layer_inputs(p) for p in layers]
    config_echo = {
        "command": "quantize",
        "seed": seed,
        "d": args.d,
        "d_fp": args.d_fp,
        "group_size": args.group_size,
        "x": args.x,
        "t": args.t,
        "slope_window": args.slope_window,
        "it": args.it,
        "epochs": args.epochs,
        "alpha_exponent": args.alpha_exponent,
        "clip_grid": list(_parse_grid(args.clip_grid)),
        "mode": args.mode,
        "layers": [p.name for p in layers],
    }

    def run_one(idx: int) -> tuple[QuantizedLayer, dict]:
        w, x = inputs[idx]
        cfg = _blc_config(args, seed=layer_seed(seed, idx))
        layer = flrq_layer(w, CalibrationBatch.from_activations(x), cfg)
        rtn = quantize_matrix(w, args.d, args.group_size, args.mode)
        rtn_err = layer_error(w, rtn, LowRankFactors.empty(*w.shape), x)
        rel = rtn_err / layer.wx_norm if layer.wx_norm > 0 else 0.0
        return layer, {"rtn_rel_error": rel}

    t0 = time.perf_counter()
    if args.threads == 1:
        results = [run_one(i) for i in range(len(layers))]
    else:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(run_one, range(len(layers))))
    elapsed = time.perf_counter() - t0

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for idx, (layer, _) in enumerate(results):
        flrq_io.write_bundle(args.out_dir / f"layer_{idx:03d}", layer, config_echo)
    report = flrq_io.emit_report(
        [layer for layer, _ in results],
        config_echo,
        total_time=None,  # kept null so reruns are byte-identical
        extras=[extra for _, extra in results],
    )
    (args.out_dir / "report.json").write_text(report)
    _log(f"quantized {len(layers)} layer(s) in {elapsed:.2f}s -> {args.out_dir}")
    return 0


def cmd_rank_sweep(args) -> int:
    seed = _resolve_seed(args.seed)
    layer_dir = _discover_layers(args.in_dir)[0]
    w, x = _read_layer_inputs(layer_dir)
    max_rank = args.max_rank
    limit = min(w.shape)
    if max_rank > limit:
        _log(f"warning: clamping --max-rank {max_rank} to min(m, n) = {limit}")
        max_rank = limit
    cfg = SketchConfig(it=args.it, seed=seed)
    rng = make_rng(seed)
    wx = w @ x
    wx_norm = fro_norm(wx)

    def rel_error(factors: LowRankFactors) -> float:
        q = quantize_matrix(w - factors.reconstruct(), args.d, args.group_size, args.mode)
        approx = dequantize(q) + factors.reconstruct()
        err = fro_norm(wx - approx @ x)
        return err / wx_norm if wx_norm > 0 else 0.0

    rows = []
    residual = w.copy()
    envelope = amax(w)
    pairs = []
    rows.append((0, envelope, rel_error(LowRankFactors.empty(*w.shape))))
    for r in range(1, max_rank + 1):
        if fro_norm(residual) <= 1e-13 * fro_norm(w):
            _log(f"residual exhausted at rank {r - 1}; stopping sweep early")
            break
        pair = r1_step(residual, cfg, rng)
        residual = residual - np.outer(pair.left, pair.right)
        pairs.append(pair)
        envelope = min(envelope, amax(residual))
        factors = LowRankFactors.from_pairs(pairs, *w.shape)
        rows.append((r, envelope, rel_error(factors)))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = args.out_dir / "rank_sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r", "amax", "rel_error"])
        writer.writerows(rows)
    config_echo = {
        "command": "rank-sweep",
        "seed": seed,
        "max_rank": max_rank,
        "it": args.it,
        "d": args.d,
        "group_size": args.group_size,
        "mode": args.mode,
        "layer": layer_dir.name,
    }
    (args.out_dir / "report.json").write_text(
        json.dumps({"config": config_echo, "rows": len(rows)}, indent=2) + "\n"
    )
    _log(f"wrote {len(rows)} sweep rows to {csv_path}")
    return 0


def _synth_workload(args, seed: int):
    layers = []
    for idx in range(args.layers):
        spec = SynthSpec(
            m=args.m,
            n=args.n,
            family=args.family,
            seed=layer_seed(seed, idx),
            tokens=args.tokens,
            outlier_count=args.outlier_count,
            outlier_boost=args.outlier_boost,
        )
        layers.append(gen_layer(spec))
    return layers


def cmd_ablate(args) -> int:
    seed = _resolve_seed(args.seed)
    if args.which not in ABLATIONS:
        raise UsageError(f"unknown ablation {args.which!r}; valid names: {', '.join(ABLATIONS)}")
    workload = _synth_workload(args, seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []

    if args.which == "it":
        # sketch_residual (fixed-rank extraction quality) is the monotone
        # column; the end-to-end rel_error also trends down but can wobble
        # per layer through the clip search.
        probe_rank = 8
        for idx, (w, calib) in enumerate(workload):
            for it in (0, 1, 2, 4):
                lseed = layer_seed(seed, idx)
                cfg = BlcConfig(rank_cfg=RankSelectionConfig(d=args.d, it=it, seed=lseed))
                layer = flrq_layer(w, calib, cfg)
                probe = deflate(w, min(probe_rank, min(w.shape)), SketchConfig(it=it, seed=lseed))
                rows.append(
                    {
                        "layer": idx,
                        "it": it,
                        "sketch_residual": fro_norm(w - probe.reconstruct()),
                        "rel_error": layer.rel_error,
                    }
                )
    elif args.which == "blc":
        for idx, (w, calib) in enumerate(workload):
            base = RankSelectionConfig(d=args.d, seed=layer_seed(seed, idx))
            on = flrq_layer(w, calib, BlcConfig(rank_cfg=base, epochs=20))
            off = flrq_layer(w, calib, BlcConfig(rank_cfg=base, epochs=1))
            rows.append(
                {
                    "layer": idx,
                    "blc_on_rel_error": on.rel_error,
                    "blc_off_rel_error": off.rel_error,
                    "improved": on.rel_error <= off.rel_error,
                }
            )
    elif args.which == "x":
        for idx, (w, calib) in enumerate(workload):
            for x_cap in (0.1, 0.2, 0.4):
                cfg = BlcConfig(
                    rank_cfg=RankSelectionConfig(d=args.d, x=x_cap, seed=layer_seed(seed, idx))
                )
                layer = flrq_layer(w, calib, cfg)
                m, n = layer.q.shape
                rows.append(
                    {
                        "layer": idx,
                        "x": x_cap,
                        "rank": layer.factors.rank,
                        "extra_bits": flrq_io.extra_bits(16, layer.factors.rank, m, n),
                        "rel_error": layer.rel_error,
                    }
                )
    else:  # fixed-vs-flex
        fixed_rank = 32
        for idx, (w, calib) in enumerate(workload):
            m, n = w.shape
            wx = w @ calib.x
            wxn = fro_norm(wx)
            scfg = RankSelectionConfig(d=args.d, seed=layer_seed(seed, idx))
            flex, _ = select_rank(w, scfg)
            fixed = deflate(w, min(fixed_rank, min(m, n)), scfg.sketch_config())

            def plain_rel(factors: LowRankFactors) -> float:
                q = quantize_matrix(w - factors.reconstruct(), args.d)
                approx = dequantize(q) + factors.reconstruct()
                return fro_norm(wx - approx @ calib.x) / wxn

            rows.append(
                {
                    "layer": idx,
                    "flex_rank": flex.rank,
                    "flex_extra_bits": flrq_io.extra_bits(16, flex.rank, m, n),
                    "flex_rel_error": plain_rel(flex),
                    "fixed_rank": fixed.rank,
                    "fixed_extra_bits": flrq_io.extra_bits(16, fixed.rank, m, n),
                    "fixed_rel_error": plain_rel(fixed),
                }
            )

    config_echo = {
        "command": "ablate",
        "which": args.which,
        "seed": seed,
        "d": args.d,
        "family": args.family,
        "m": args.m,
        "n": args.n,
        "tokens": args.tokens,
        "layers": args.layers,
        "outlier_count": args.outlier_count,
        "outlier_boost": args.outlier_boost,
    }
    out = {"config": config_echo, "rows": rows}
    path = args.out_dir / f"ablate_{args.which.replace('-', '_')}.json"
    path.write_text(json.dumps(out, indent=2) + "\n")
    csv_path = args.out_dir / f"ablate_{args.which.replace('-', '_')}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if rows:
            writer.writerow(list(rows[0].keys()))
            for row in rows:
                writer.writerow(list(row.values()))
    _log(f"ablation {args.which}: {len(rows)} rows -> {path}")
    return 0


def cmd_compare_svd(args) -> int:
    seed = _resolve_seed(args.seed)
    layer_dir = _discover_layers(args.in_dir)[0]
    w, _ = _read_layer_inputs(layer_dir)
    rank = min(args.rank, min(w.shape))
    t0 = time.perf_counter()
    oracle = svd_oracle(w)
    svd_time = time.perf_counter() - t0
    svd_residual = oracle.truncation_error(rank)

    sketch_residuals = []
    t0 = time.perf_counter()
    for rep in range(args.seeds):
        factors = deflate(w, rank, SketchConfig(it=args.it, seed=layer_seed(seed, rep)))
        sketch_residuals.append(fro_norm(w - factors.reconstruct()))
    sketch_time = (time.perf_counter() - t0) / max(args.seeds, 1)
    mean_sketch = float(np.mean(sketch_residuals))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = args.out_dir / "compare_svd.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "rank", "residual_fro", "seconds"])
        writer.writerow(["svd_truncation", rank, svd_residual, f"{svd_time:.6f}"])
        writer.writerow(["sketch_deflate", rank, mean_sketch, f"{sketch_time:.6f}"])
    config_echo = {
        "command": "compare-svd",
        "seed": seed,
        "rank": rank,
        "it": args.it,
        "seeds": args.seeds,
        "layer": layer_dir.name,
    }
    (args.out_dir / "report.json").write_text(
        json.dumps(
            {
                "config": config_echo,
                "svd_residual": svd_residual,
                "sketch_residual_mean": mean_sketch,
                "ratio": mean_sketch / svd_residual if svd_residual > 0 else None,
            },
            indent=2,
        )
        + "\n"
    )
    _log(
        f"rank {rank}: svd residual {svd_residual:.4f} ({svd_time:.3f}s), "
        f"sketch mean {mean_sketch:.4f} ({sketch_time:.3f}s/run)"
    )
    return 0


_COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "quantize": cmd_quantize,
    "rank-sweep": cmd_rank_sweep,
    "ablate": cmd_ablate,
    "compare-svd": cmd_compare_svd,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return 1
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return 3
    except (FormatError, FlrqError) as exc:
        _log(f"error: {exc}")
        return 2
    except OSError as exc:
        _log(f"i/o error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
