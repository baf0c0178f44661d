"""Command-line entry point: ``hiendmae <command> ...``.

Exit codes: 0 ok, 2 usage/config error, 3 I/O failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from hiendmae import diagnostics as dg
from hiendmae import plotting
from hiendmae.config import config_to_dict, load_config
from hiendmae.decoder import DecoderConfig
from hiendmae.encoder import EncoderConfig
from hiendmae.errors import (
    BadMagic,
    BadRatio,
    CheckpointError,
    ConfigError,
    HiEndMAEError,
    IndexOutOfRange,
    NonFinite,
    NonFiniteLoss,
    VolumeError,
)
from hiendmae.trainer import (
    FULL_SCALE,
    TrainConfig,
    load_checkpoint,
    read_metrics,
    save_checkpoint,
    train,
)
from hiendmae.volume_io import (
    crop_subvolume,
    load_rvol,
    preprocess,
    random_phantom,
    save_rvol,
    synth_volume,
)

log = logging.getLogger("hiendmae")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _triple(text: str, flag: str) -> tuple[int, int, int]:
    try:
        vals = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"{flag}: expected three comma-separated integers, got {text!r}") from None
    if len(vals) != 3 or min(vals) < 1:
        raise UsageError(f"{flag}: expected three positive integers, got {text!r}")
    return vals


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    dims = _triple(args.dims, "--dims")
    if args.count < 1:
        raise UsageError("--count: must be a positive integer")
    out = _out_dir(args.out)
    entries = []
    for i in range(args.count):
        seed = args.seed + i
        rng = np.random.default_rng(seed)
        vol = synth_volume(random_phantom(dims, rng), dims, seed=seed, noise_hu=args.noise)
        name = f"vol_{i:04d}.rvol"
        save_rvol(vol, out / name)
        entries.append({"file": name, "seed": seed})
    manifest = {"dims": list(dims), "seed": args.seed, "noise_hu": args.noise, "volumes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.count} volumes of {dims[0]}x{dims[1]}x{dims[2]} to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    run = load_config(args.config)
    cfg = run.train
    out = _out_dir(args.out or run.output_dir)
    (out / "config.json").write_text(json.dumps(config_to_dict(run), indent=2) + "\n")
    resume = load_checkpoint(args.resume, expect=cfg) if args.resume else None
    if resume is not None and resume.step >= cfg.total_steps:
        print(f"checkpoint already at step {resume.step} = total_steps; nothing to do")
        return EXIT_OK
    metrics = out / "metrics.csv"
    try:
        trace, state = train(cfg, resume=resume, steps=args.steps, metrics_path=metrics)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(state, out / "checkpoint.hemc")
    plotting.plot_loss(read_metrics(metrics), out / "loss.png")
    if trace:
        print(f"step {state.step}/{cfg.total_steps} final loss {trace[-1][2]:.6f}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, BadMagic, CheckpointError, ValueError, KeyError) as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc


def _probe_volumes(state, args) -> list:
    cfg = state.config
    crop = cfg.data.crop
    if args.probes:
        files = sorted(Path(args.probes).glob("*.rvol"))
        if not files:
            raise OSError(f"no .rvol files in {args.probes}")
        vols = [load_rvol(f) for f in files]
    else:
        rng = np.random.default_rng(args.probe_seed)
        vols = [synth_volume(random_phantom(crop, rng), crop, seed=args.probe_seed + i, noise_hu=10.0)
                for i in range(args.probe_count)]
    out = []
    for v in vols:
        origin = tuple((n - c) // 2 for n, c in zip(v.dims, crop))
        out.append(preprocess(crop_subvolume(v, origin, crop), *cfg.data.clip))
    return out


def cmd_diagnose(args) -> int:
    state = _load_ckpt(args.checkpoint)
    if not 0.0 <= args.mask_ratio < 1.0:
        raise UsageError("--mask-ratio: must lie in [0, 1)")
    probes = _probe_volumes(state, args)
    out = _out_dir(args.out)
    rows = dg.spectrum_sweep(state.model, probes, mask_ratio=args.mask_ratio, seed=args.probe_seed)
    dg.write_spectra_csv(rows, out / "spectra.csv")
    plotting.plot_spectra(rows, out / "spectra.png")
    print("volume,layer,effective_rank")
    for vol, r in rows:
        print(f"{vol},{r.layer},{r.effective_rank:.6f}")
    return EXIT_OK


def cmd_attnmap(args) -> int:
    state = _load_ckpt(args.checkpoint)
    head = None if args.head == "mean" else int(args.head)
    if args.volume:
        vol = load_rvol(args.volume)
        crop = state.config.data.crop
        origin = tuple((n - c) // 2 for n, c in zip(vol.dims, crop))
        vol = preprocess(crop_subvolume(vol, origin, crop), *state.config.data.clip)
    else:
        vol = _probe_volumes(state, args)[0]
    try:
        amap, grid = dg.attention_map(state.model, vol, args.query, args.layer, head)
    except IndexOutOfRange as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args.out)
    prefix = out / args.prefix
    dg.write_attention_csv(amap, f"{prefix}_layer{args.layer}.csv")
    pgms = dg.write_attention_pgms(amap, prefix, args.layer)
    plotting.plot_attention(amap, f"{prefix}_layer{args.layer}.png",
                            title=f"query {args.query}, layer {args.layer}, head {args.head}")
    print(f"map sum {amap.sum():.6f} over grid {grid.grid}; wrote {len(pgms)} slices to {out}")
    return EXIT_OK


def _model_configs(args) -> tuple[EncoderConfig, DecoderConfig, tuple[int, int, int]]:
    if args.config:
        cfg = load_config(args.config).train
        grid = tuple(c // cfg.encoder.patch_size for c in cfg.data.crop)
        return cfg.encoder, cfg.decoder, grid
    if args.preset == "full":
        enc, dec = FULL_SCALE["encoder"], FULL_SCALE["decoder"]
        return enc, dec, (8, 8, 8)
    cfg = TrainConfig()
    grid = tuple(c // cfg.encoder.patch_size for c in cfg.data.crop)
    return cfg.encoder, cfg.decoder, grid


def cmd_flops(args) -> int:
    enc, dec, grid = _model_configs(args)
    n = args.n_tokens or int(np.prod(grid))
    gammas = args.gamma or [0.75, 0.0]
    for g in gammas:
        if not 0.0 <= g < 1.0:
            raise UsageError(f"--gamma: {g} outside [0, 1)")
    reports = [dg.count_macs(enc, dec, n, g) for g in gammas]
    rows = dg.macs_table(reports)
    print(f"# {dg.MAC_CONVENTION}")
    print(f"# encoder dim {enc.embed_dim} x{enc.depth}, decoder dim {dec.dec_dim}, "
          f"{dec.n_self} self + {dec.n_cross} cross stages, N = {n}")
    cols = list(rows[0])
    print(",".join(cols))
    for r in rows:
        print(",".join(str(r[c]) for c in cols))
    if len(reports) > 1:
        print(f"similarity ratio gamma={gammas[0]} vs gamma={gammas[1]}: "
              f"{reports[0].cross_similarity / reports[1].cross_similarity}")
    depth = dec.depth
    stage_rows = []
    for b in range(depth + 1 if args.all_stages else min(depth, len(enc.tap_layers)) + 1):
        d = DecoderConfig(dec.dec_dim, dec.heads, depth - b, b, dec.ffn_ratio)
        r = dg.count_macs(enc, d, n, gammas[0])
        stage_rows.append({"cross_stages": b, "self_blocks": depth - b, "decoder_macs": r.decoder_total,
                           "baseline_decoder_macs": r.baseline_total})
    print("cross_stages,self_blocks,decoder_macs")
    for r in stage_rows:
        print(f"{r['cross_stages']},{r['self_blocks']},{r['decoder_macs']}")
    if args.out:
        out = _out_dir(args.out)
        dg.write_rows_csv(rows, out / "flops.csv", comment=dg.MAC_CONVENTION)
        dg.write_rows_csv(stage_rows, out / "flops_stages.csv", comment=dg.MAC_CONVENTION)
        plotting.plot_macs(stage_rows, out / "flops_stages.png", x_key="cross_stages")
    return EXIT_OK


def cmd_bench(args) -> int:
    enc, dec, grid = _model_configs(args)
    if args.grid:
        grid = _triple(args.grid, "--grid")
    gammas = args.gamma or [0.5, 0.75, 0.9]
    rows = dg.bench_decoder(enc, dec, grid, gammas, reps=args.reps, warmup=args.warmup, threads=1)
    out = _out_dir(args.out)
    dg.write_rows_csv(rows, out / "bench.csv", comment="threads=1; median wall-clock per decoder forward")
    plotting.plot_bench(rows, out / "bench.png")
    print("variant,gamma,N,M,median_ms")
    for r in rows:
        print(f"{r['variant']},{r['gamma']},{r['N']},{r['M']},{r['median_s'] * 1e3:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="hiendmae", description="Hierarchical encoder-driven masked autoencoder toolkit.",
                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write synthetic CT-like RVOL volumes", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=4, help="number of volumes")
    s.add_argument("--dims", default="32,32,32", help="D,H,W in voxels")
    s.add_argument("--seed", type=int, default=0, help="base seed (volume i uses seed+i)")
    s.add_argument("--noise", type=float, default=10.0, help="Gaussian noise std in HU")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="run masked pre-training from a JSON config", formatter_class=fmt)
    s.add_argument("--config", required=True, help="JSON run config (see configs/desk.json)")
    s.add_argument("--resume", default=None, help="HEMC checkpoint to continue from")
    s.add_argument("--steps", type=int, default=None, help="stop after this many steps (default: run to total_steps)")
    s.add_argument("--out", default=None, help="override output_dir from the config")
    s.set_defaults(func=cmd_pretrain)

    def probes(sp):
        sp.add_argument("--probes", default=None, help="directory of .rvol probe volumes (default: synthetic)")
        sp.add_argument("--probe-count", type=int, default=4, help="synthetic probe count")
        sp.add_argument("--probe-seed", type=int, default=1234, help="synthetic probe seed")

    s = sub.add_parser("diagnose", help="singular spectra and effective rank per encoder layer", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="HEMC checkpoint")
    s.add_argument("--out", default="reports/diagnose", help="output directory")
    s.add_argument("--mask-ratio", type=float, default=0.0, help="mask ratio applied to probes")
    probes(s)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("attnmap", help="attention map of one query token", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="HEMC checkpoint")
    s.add_argument("--query", type=int, default=0, help="query token index")
    s.add_argument("--layer", type=int, default=1, help="encoder layer (1-based)")
    s.add_argument("--head", default="mean", help="head index or 'mean'")
    s.add_argument("--volume", default=None, help="RVOL volume (default: first synthetic probe)")
    s.add_argument("--out", default="reports/attnmap", help="output directory")
    s.add_argument("--prefix", default="attn", help="file name prefix")
    probes(s)
    s.set_defaults(func=cmd_attnmap)

    def model_src(sp):
        sp.add_argument("--config", default=None, help="JSON run config supplying model widths")
        sp.add_argument("--preset", choices=("desk", "full"), default="desk",
                        help="model widths when no config is given (full: ViT-B/12, dim 1536, decoder 528)")

    s = sub.add_parser("flops", help="analytic MAC counts and the similarity-term ratio", formatter_class=fmt)
    model_src(s)
    s.add_argument("--gamma", type=float, action="append", default=None,
                   help="mask ratio (repeatable; default 0.75 and 0.0)")
    s.add_argument("--n-tokens", type=int, default=None, help="token count N (default: from crop and patch)")
    s.add_argument("--all-stages", action="store_true", help="sweep cross stages up to the full decoder depth")
    s.add_argument("--out", default=None, help="also write CSV and figure here")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("bench", help="single-thread decoder wall-clock", formatter_class=fmt)
    model_src(s)
    s.add_argument("--gamma", type=float, action="append", default=None,
                   help="mask ratio (repeatable; default 0.5, 0.75, 0.9)")
    s.add_argument("--grid", default=None, help="patch grid Gd,Gh,Gw (default: from crop and patch)")
    s.add_argument("--reps", type=int, default=20, help="timed repetitions")
    s.add_argument("--warmup", type=int, default=3, help="untimed warm-up calls")
    s.add_argument("--out", default="reports/bench", help="output directory")
    s.set_defaults(func=cmd_bench)
    return p


def _threads() -> int | None:
    raw = os.environ.get("HIENDMAE_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"HIENDMAE_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads()
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigError, BadRatio) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFinite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, BadMagic, VolumeError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except HiEndMAEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
