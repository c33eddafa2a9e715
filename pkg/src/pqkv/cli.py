"""Command-line harness: synthetic KV generation, codebook training,
oracle verification, decode benchmarking, latency breakdown, and the
outlier-sensitivity study.

Every command is deterministic for a fixed --seed except wall-clock
timing fields. A JSON --config file may supply defaults for any option;
explicit command-line flags win.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import analysis, fileio, pq_core
from .harness import (
    BenchConfig,
    PHASES,
    SynthSpec,
    latency_breakdown,
    bench_decode,
    synth_kv,
    train_pair,
    verify_stream,
)
from .pq_core import PQConfig, PRESETS

BENCH_CSV_COLUMNS = ["context_len", "tpot_ms_fp", "tpot_ms_pq",
                     "bytes_fp", "bytes_pq", "speedup"]
BREAKDOWN_CSV_COLUMNS = PHASES + ["total", "context_len", "worker"]


def _apply_config(ctx: click.Context, config_path: str | None) -> None:
    """Fill in defaults from a JSON config file for params the user did
    not set explicitly."""
    if not config_path:
        return
    overrides = json.loads(Path(config_path).read_text())
    for name, value in overrides.items():
        if name not in ctx.params:
            raise click.BadParameter(f"unknown config key {name!r}")
        src = ctx.get_parameter_source(name)
        if src == click.core.ParameterSource.DEFAULT:
            ctx.params[name] = value


def _out_dir(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_geometry(preset: str | None, m: int | None, nbits: int | None,
                      d: int) -> tuple[int, int]:
    if m is not None and nbits is not None:
        return m, nbits
    if preset:
        if preset not in PRESETS:
            raise click.BadParameter(
                f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"
            )
        return PRESETS[preset]
    raise click.BadParameter("provide either --preset or both --m and --nbits")


def _parse_channels(text: str) -> list[int]:
    return [int(c) for c in text.split(",") if c.strip()] if text else []


@click.group()
def main():
    """Product-quantized KV cache toolkit."""


@main.command()
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--n-tokens", "n_tokens", type=int, default=4096, show_default=True)
@click.option("--d", type=int, default=128, show_default=True)
@click.option("--sigma", type=float, default=1.0, show_default=True)
@click.option("--outlier-channels", "outlier_channels", default="",
              help="Comma-separated channel indices with inflated std.")
@click.option("--outlier-scale", "outlier_scale", type=float, default=20.0,
              show_default=True)
@click.option("--outlier-rate", "outlier_rate", type=float, default=0.0,
              show_default=True, help="Per-element spike probability.")
@click.option("--outlier-magnitude", "outlier_magnitude", type=float,
              default=50.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default="out", show_default=True)
@click.pass_context
def synth(ctx, config, n_tokens, d, sigma, outlier_channels, outlier_scale,
          outlier_rate, outlier_magnitude, seed, out):
    """Write synthetic key/value tensor files."""
    _apply_config(ctx, config)
    p = ctx.params
    spec = SynthSpec(
        n_tokens=p["n_tokens"], d=p["d"], seed=p["seed"], sigma=p["sigma"],
        outlier_channels=_parse_channels(str(p["outlier_channels"])),
        outlier_scale=p["outlier_scale"], outlier_rate=p["outlier_rate"],
        outlier_magnitude=p["outlier_magnitude"],
    )
    K, V = synth_kv(spec)
    out_dir = _out_dir(p["out"])
    fileio.write_tensor(out_dir / "keys.f32", K, "synthetic key stream")
    fileio.write_tensor(out_dir / "values.f32", V, "synthetic value stream")
    click.echo(f"wrote {out_dir}/keys.f32 and values.f32 "
               f"({spec.n_tokens} x {spec.d})")


@main.command()
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--keys", required=True, type=click.Path(exists=True))
@click.option("--values", required=True, type=click.Path(exists=True))
@click.option("--preset", default=None,
              help=f"Geometry preset, one of {sorted(PRESETS)}.")
@click.option("--m", type=int, default=None, help="Subspace count.")
@click.option("--nbits", type=int, default=None, help="Bits per subspace code.")
@click.option("--kmeans-iters", "kmeans_iters", type=int, default=25,
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default="out", show_default=True)
@click.pass_context
def train(ctx, config, keys, values, preset, m, nbits, kmeans_iters, seed, out):
    """Train key/value codebooks and write them as binary files."""
    _apply_config(ctx, config)
    p = ctx.params
    K = fileio.read_tensor(p["keys"])
    V = fileio.read_tensor(p["values"])
    d = K.shape[1]
    M, nb = _resolve_geometry(p["preset"], p["m"], p["nbits"], d)
    try:
        cfg = PQConfig(d=d, M=M, nbits=nb, kmeans_iters=p["kmeans_iters"],
                       seed=p["seed"])
    except ValueError as exc:
        raise click.ClickException(str(exc))

    cb_K, cb_V = train_pair(K, V, cfg)
    out_dir = _out_dir(p["out"])
    fileio.write_codebook(out_dir / "cb_key.pqkv", cb_K)
    fileio.write_codebook(out_dir / "cb_value.pqkv", cb_V)

    for name, cb, X in (("key", cb_K, K), ("value", cb_V, V)):
        X_hat = pq_core.reconstruct(pq_core.assign_codes(X, cb), cb)
        err = X.astype(np.float64) - X_hat
        per_sub = err.reshape(X.shape[0], cfg.M, cfg.dsub)
        distortion = np.sum(per_sub**2, axis=(0, 2))
        click.echo(f"{name}: per-subspace distortion "
                   f"min={distortion.min():.4g} median={np.median(distortion):.4g} "
                   f"max={distortion.max():.4g}")
    click.echo(f"bits_per_value: {pq_core.bits_per_value(cfg)}")
    click.echo(f"wrote {out_dir}/cb_key.pqkv and cb_value.pqkv")


@main.command()
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--keys", required=True, type=click.Path(exists=True))
@click.option("--values", required=True, type=click.Path(exists=True))
@click.option("--cb-key", "cb_key", required=True, type=click.Path(exists=True))
@click.option("--cb-value", "cb_value", required=True, type=click.Path(exists=True))
@click.option("--recent-capacity", "recent_capacity", type=int, default=0,
              show_default=True)
@click.option("--flush-threshold", "flush_threshold", type=int, default=1,
              show_default=True)
@click.option("--tolerance", type=float, default=1e-5, show_default=True)
@click.option("--n-prefill", "n_prefill", type=int, default=None)
@click.option("--dump", type=click.Path(exists=True), default=None,
              help="Also validate an existing cache dump file.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default="out", show_default=True)
@click.pass_context
def verify(ctx, config, keys, values, cb_key, cb_value, recent_capacity,
           flush_threshold, tolerance, n_prefill, dump, seed, out):
    """Replay a decode loop against the dequantize-then-naive oracle.

    Exit code is 0 iff the max relative error is within tolerance (and
    any provided dump file is well-formed).
    """
    _apply_config(ctx, config)
    p = ctx.params
    try:
        cb_K = fileio.read_codebook(p["cb_key"])
        cb_V = fileio.read_codebook(p["cb_value"])
        if p["dump"]:
            fileio.read_cache_dump(p["dump"])
            click.echo(f"dump {p['dump']}: ok")
    except fileio.FormatError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)

    K = fileio.read_tensor(p["keys"])
    V = fileio.read_tensor(p["values"])
    report = verify_stream(
        K, V, cb_K, cb_V,
        recent_capacity=p["recent_capacity"],
        flush_threshold=p["flush_threshold"],
        n_prefill=p["n_prefill"], seed=p["seed"],
    )
    report["tolerance"] = p["tolerance"]
    report["passed"] = report["max_rel_error"] <= p["tolerance"]

    out_dir = _out_dir(p["out"])
    (out_dir / "verify.json").write_text(json.dumps(report, indent=2) + "\n")
    status = "PASS" if report["passed"] else "FAIL"
    click.echo(f"{status} max_rel_error={report['max_rel_error']:.3e} "
               f"tolerance={p['tolerance']:.1e} steps={report['steps']}")
    sys.exit(0 if report["passed"] else 1)


def _bench_config(p: dict) -> BenchConfig:
    M, nb = _resolve_geometry(p["preset"], p["m"], p["nbits"], p["d"])
    return BenchConfig(
        context_lengths=[int(c) for c in str(p["contexts"]).split(",")],
        gen_tokens=p["gen_tokens"], d=p["d"], M=M, nbits=nb,
        recent_capacity=p["recent_capacity"],
        flush_threshold=p["flush_threshold"],
        repetitions=p["repetitions"], warmup=p["warmup"],
        seed=p["seed"],
    )


_bench_options = [
    click.option("--config", type=click.Path(exists=True), default=None),
    click.option("--contexts", default="1024,4096,16384,32768",
                 show_default=True),
    click.option("--gen-tokens", "gen_tokens", type=int, default=100,
                 show_default=True),
    click.option("--d", type=int, default=128, show_default=True),
    click.option("--preset", default="m64b8", show_default=True),
    click.option("--m", type=int, default=None),
    click.option("--nbits", type=int, default=None),
    click.option("--recent-capacity", "recent_capacity", type=int, default=32,
                 show_default=True),
    click.option("--flush-threshold", "flush_threshold", type=int, default=32,
                 show_default=True),
    click.option("--repetitions", type=int, default=5, show_default=True),
    click.option("--warmup", type=int, default=2, show_default=True),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--out", default="out", show_default=True),
]


def _with_bench_options(fn):
    for opt in reversed(_bench_options):
        fn = opt(fn)
    return fn


@main.command()
@_with_bench_options
@click.pass_context
def bench(ctx, **_kwargs):
    """Decode-loop TPOT benchmark: quantized path vs full precision.

    Numbers are machine-relative; run on an otherwise idle host.
    """
    _apply_config(ctx, ctx.params["config"])
    p = ctx.params
    cfg = _bench_config(p)
    out_dir = _out_dir(p["out"])

    def progress(row):
        click.echo(
            f"ctx={row['context_len']:>6} tpot_fp={row['tpot_ms_fp']:.3f}ms "
            f"tpot_pq={row['tpot_ms_pq']:.3f}ms speedup={row['speedup']:.2f}x "
            f"bytes_ratio={row['bytes_ratio']:.3f}"
        )

    rows = bench_decode(cfg, progress=progress)
    with open(out_dir / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_CSV_COLUMNS,
                                extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    click.echo(f"wrote {out_dir}/bench.csv")


@main.command()
@_with_bench_options
@click.option("--context", type=int, default=None,
              help="Context length to instrument (default: largest).")
@click.option("--worker", type=click.Choice(["thread", "sync"]),
              default="thread", show_default=True)
@click.pass_context
def breakdown(ctx, **_kwargs):
    """Per-phase latency breakdown of one instrumented decode loop."""
    _apply_config(ctx, ctx.params["config"])
    p = ctx.params
    cfg = _bench_config(p)
    result = latency_breakdown(cfg, context_len=p["context"],
                               worker=p["worker"])
    out_dir = _out_dir(p["out"])
    with open(out_dir / "breakdown.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BREAKDOWN_CSV_COLUMNS)
        writer.writeheader()
        writer.writerow({k: result[k] for k in BREAKDOWN_CSV_COLUMNS})
    for phase in PHASES:
        click.echo(f"{phase:>10}: {result[phase] * 1e3:9.3f} ms")
    click.echo(f"{'total':>10}: {result['total'] * 1e3:9.3f} ms")
    click.echo(f"wrote {out_dir}/breakdown.csv")


@main.command()
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--keys", required=True, type=click.Path(exists=True))
@click.option("--preset", default="m64b8", show_default=True)
@click.option("--m", type=int, default=None)
@click.option("--nbits", type=int, default=None)
@click.option("--fraction", type=float, default=0.01, show_default=True)
@click.option("--int-nbits", "int_nbits", type=int, default=None,
              help="Bit width for the integer comparator "
                   "(default: matched to the PQ bits per value).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default="out", show_default=True)
@click.pass_context
def sensitivity(ctx, config, keys, preset, m, nbits, fraction, int_nbits,
                seed, out):
    """Outlier-sensitivity study: PQ vs uniform integer quantization."""
    _apply_config(ctx, config)
    p = ctx.params
    X = fileio.read_tensor(p["keys"])
    d = X.shape[1]
    M, nb = _resolve_geometry(p["preset"], p["m"], p["nbits"], d)
    cfg = PQConfig(d=d, M=M, nbits=nb, seed=p["seed"])

    rep_pq = analysis.sensitivity_study(X, cfg, fraction=p["fraction"])
    rep_int = analysis.sensitivity_study(X, cfg, fraction=p["fraction"],
                                         quantizer="int",
                                         int_nbits=p["int_nbits"])
    report = {
        "fraction": p["fraction"],
        "bits_per_value": pq_core.bits_per_value(cfg),
        "pq": rep_pq.to_dict(),
        "int": rep_int.to_dict(),
    }
    out_dir = _out_dir(p["out"])
    (out_dir / "sensitivity.json").write_text(json.dumps(report, indent=2) + "\n")
    click.echo(f"pq sensitivity:  {rep_pq.sensitivity:+.4f}")
    click.echo(f"int sensitivity: {rep_int.sensitivity:+.4f}")
    click.echo(f"wrote {out_dir}/sensitivity.json")


@main.command()
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--keys", required=True, type=click.Path(exists=True))
@click.option("--outlier-k", "outlier_k", type=float, default=5.0,
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default="out", show_default=True)
@click.pass_context
def stats(ctx, config, keys, outlier_k, seed, out):
    """Channel-wise distribution statistics for a tensor file."""
    _apply_config(ctx, config)
    p = ctx.params
    X = fileio.read_tensor(p["keys"])
    cs = analysis.channel_stats(X, outlier_k=p["outlier_k"])
    out_dir = _out_dir(p["out"])
    (out_dir / "stats.json").write_text(json.dumps(cs.to_dict(), indent=2) + "\n")
    click.echo(f"global absmax: {cs.global_absmax:.4g}")
    click.echo(f"outlier channels (std > {p['outlier_k']}x median): "
               f"{cs.outlier_channels}")
    click.echo(f"wrote {out_dir}/stats.json")


if __name__ == "__main__":
    main()
