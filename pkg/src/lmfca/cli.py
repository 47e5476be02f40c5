"""Command-line entry point: synth, train, enhance, eval, count, bench.

Runs are configured by a key-value text file plus flag overrides, flags
winning. Unknown keys are hard errors. Every command that produces output
writes the fully-resolved configuration next to it, and that file can be
fed back via --config to reproduce the run. LMFCA_LOG=debug|info|quiet
controls verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import complexity, dsp, signals
from .errors import ConfigError
from .evaluate import enhance_waveform, evaluate, measure_rtf
from .model import ModelConfig
from .roomsim import SNR_RANGE, synth_dataset
from .train import LossWeights, load_model, train

log = logging.getLogger("lmfca")

KNOWN_KEYS = {
    # model
    "model.channels", "model.mics", "model.fca_kernel", "model.dconv_kernel",
    "model.enable_fca", "model.sandglass", "model.ft_fca_everywhere",
    "model.encoder_kinds", "model.trunk_style", "model.init_seed",
    # training
    "train.epochs", "train.lr", "train.batch_size", "train.seed",
    "train.val_fraction", "train.alpha", "train.beta", "train.sisdr_cap_db",
    "train.threads",
    # data synthesis
    "data.clean_dir", "data.noise_dir", "data.out_dir", "data.rooms",
    "data.rirs_per_room", "data.seed", "data.snr_lo", "data.snr_hi",
    "data.threads",
    # evaluation
    "eval.manifest", "eval.target", "eval.repeats", "eval.duration",
}

DEFAULTS = {
    "train.epochs": "10",
    "train.lr": "1e-4",
    "train.batch_size": "4",
    "train.seed": "0",
    "train.val_fraction": "0.25",
    "train.alpha": "0.1",
    "train.beta": "1e-4",
    "train.sisdr_cap_db": "30.0",
    "train.threads": "1",
    "data.rooms": "200",
    "data.rirs_per_room": "20",
    "data.seed": "0",
    "data.snr_lo": str(SNR_RANGE[0]),
    "data.snr_hi": str(SNR_RANGE[1]),
    "data.threads": "1",
    "eval.target": "direct",
    "eval.repeats": "5",
    "eval.duration": "30.0",
}


def parse_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def resolve_config(args) -> dict:
    """defaults <- config file <- --set overrides; unknown keys are fatal."""
    cfg = dict(DEFAULTS)
    cfg.update(ModelConfig().to_dict())
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg[key.strip()] = value.strip()
    unknown = set(cfg) - KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return cfg


def write_resolved(cfg: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    path.write_text("\n".join(lines) + "\n")
    log.info("resolved config written to %s", path)


def model_config_from(cfg: dict, variant=None, mono=False) -> ModelConfig:
    if variant:
        base = ModelConfig.variant(variant).to_dict()
        base["model.init_seed"] = cfg.get("model.init_seed", "0")
        cfg = {**cfg, **base}
    if mono:
        cfg = {**cfg, "model.mics": "1"}
    return ModelConfig.from_dict(cfg)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = resolve_config(args)
    out_dir = Path(args.out or cfg.get("data.out_dir") or "")
    if not str(out_dir):
        raise ConfigError("synth needs --out or data.out_dir")
    if args.rooms is not None:
        cfg["data.rooms"] = str(args.rooms)
    if args.rirs_per_room is not None:
        cfg["data.rirs_per_room"] = str(args.rirs_per_room)
    if args.seed is not None:
        cfg["data.seed"] = str(args.seed)
    cfg["data.out_dir"] = str(out_dir)

    if args.self_test:
        rng = np.random.default_rng(int(cfg["data.seed"]))
        clean_dir = out_dir / "_selftest_clean"
        noise_dir = out_dir / "_selftest_noise"
        clean_dir.mkdir(parents=True, exist_ok=True)
        noise_dir.mkdir(parents=True, exist_ok=True)
        for i in range(4):
            dsp.write_wav(clean_dir / f"speech{i}.wav", signals.make_speech(rng, 2.0).samples)
        for i, kind in enumerate(["pink", "white", "babble"]):
            dsp.write_wav(noise_dir / f"noise{i}.wav", signals.make_noise(rng, 3.0, kind).samples)
        cfg["data.clean_dir"] = str(clean_dir)
        cfg["data.noise_dir"] = str(noise_dir)
    else:
        if args.clean_dir:
            cfg["data.clean_dir"] = args.clean_dir
        if args.noise_dir:
            cfg["data.noise_dir"] = args.noise_dir
        if "data.clean_dir" not in cfg or "data.noise_dir" not in cfg:
            raise ConfigError("synth needs --clean-dir/--noise-dir (or --self-test)")

    write_resolved(cfg, out_dir / "run-config.txt")
    manifest = synth_dataset(
        cfg["data.clean_dir"], cfg["data.noise_dir"], out_dir,
        n_rooms=int(cfg["data.rooms"]),
        rirs_per_room=int(cfg["data.rirs_per_room"]),
        seed=int(cfg["data.seed"]),
        snr_range=(float(cfg["data.snr_lo"]), float(cfg["data.snr_hi"])),
        threads=int(cfg["data.threads"]),
    )
    n = int(cfg["data.rooms"]) * int(cfg["data.rirs_per_room"])
    print(f"wrote {n} examples; manifest: {manifest}")
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    if args.manifest:
        cfg["eval.manifest"] = args.manifest
    manifest = cfg.get("eval.manifest")
    if not manifest:
        raise ConfigError("train needs --manifest")
    if args.epochs is not None:
        cfg["train.epochs"] = str(args.epochs)
    if args.seed is not None:
        cfg["train.seed"] = str(args.seed)
    out_dir = Path(args.out)
    model_cfg = model_config_from(cfg, variant=args.variant, mono=args.mono)
    cfg.update(model_cfg.to_dict())
    write_resolved(cfg, out_dir / "run-config.txt")
    weights = LossWeights(alpha=float(cfg["train.alpha"]), beta=float(cfg["train.beta"]),
                          sisdr_cap_db=float(cfg["train.sisdr_cap_db"]))
    best = train(
        model_cfg, manifest, out_dir,
        epochs=int(cfg["train.epochs"]),
        seed=int(cfg["train.seed"]),
        lr=float(cfg["train.lr"]),
        batch_size=int(cfg["train.batch_size"]),
        val_fraction=float(cfg["train.val_fraction"]),
        weights=weights,
        resume=args.resume,
        threads=int(cfg["train.threads"]),
        log=log.info,
    )
    print(f"best checkpoint: {best}")
    return 0


def cmd_enhance(args):
    net, _, _ = load_model(args.checkpoint)
    wav = dsp.read_wav(args.input)
    out = enhance_waveform(net, wav)
    dsp.write_wav(args.output, out.samples)
    print(f"enhanced {args.input} -> {args.output} ({out.duration:.2f}s)")
    return 0


def cmd_eval(args):
    cfg = resolve_config(args)
    if args.target:
        cfg["eval.target"] = args.target
    net, _, _ = load_model(args.checkpoint)
    summary = complexity.count_macs_flops(net.config)
    stats = {
        "params": net.store.num_values(),
        "gmacs": round(summary.macs / 1e9, 4),
        "gflops": round(summary.flops / 1e9, 4),
    }
    report = evaluate(lambda w: enhance_waveform(net, w), args.manifest,
                      target=cfg["eval.target"], model_stats=stats)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_count(args):
    cfg = resolve_config(args)
    model_cfg = model_config_from(cfg, variant=args.variant, mono=args.mono)
    summary = complexity.count_macs_flops(model_cfg, f=256, t=args.frames)
    print(complexity.format_table(summary, title=f"variant={args.variant or 'config'} "
                                                 f"input=256x{args.frames}x{model_cfg.in_channels}"))
    return 0


def cmd_bench(args):
    cfg = resolve_config(args)
    if args.duration is not None:
        cfg["eval.duration"] = str(args.duration)
    if args.repeats is not None:
        cfg["eval.repeats"] = str(args.repeats)
    net, _, _ = load_model(args.checkpoint)
    rng = np.random.default_rng(0)
    seconds = float(cfg["eval.duration"])
    chans = [signals.make_speech(rng, seconds).samples for _ in range(net.config.mics)]
    wav = dsp.Waveform(np.stack(chans, axis=1) if net.config.mics > 1 else chans[0])
    result = measure_rtf(lambda w: enhance_waveform(net, w),
                         wav, repeats=int(cfg["eval.repeats"]))
    print(f"rtf = {result['rtf']:.4f} over {len(result['runs'])} runs of "
          f"{result['duration_s']:.1f}s ({result['phases']})")
    for i, r in enumerate(result["runs"]):
        print(f"  run {i}: {r:.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="lmfca", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key-value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    sp = sub.add_parser("synth", help="synthesize a multi-channel training set")
    common(sp)
    sp.add_argument("--clean-dir")
    sp.add_argument("--noise-dir")
    sp.add_argument("--out", required=True)
    sp.add_argument("--rooms", type=int)
    sp.add_argument("--rirs-per-room", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--self-test", action="store_true",
                    help="generate internal speech-shaped signals instead of reading WAV dirs")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model on a synthesized manifest")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--variant", choices=["full", "no-fca", "pconv-sandglass", "ft-everywhere"])
    sp.add_argument("--mono", action="store_true")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("enhance", help="enhance one WAV file")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", dest="output", required=True)
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("eval", help="batch SI-SDR evaluation over a manifest")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--target", choices=["direct", "reverberant"])
    sp.add_argument("--out", help="write the report to this file")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("count", help="static MAC/FLOP table for a configuration")
    common(sp)
    sp.add_argument("--variant", choices=["full", "no-fca", "pconv-sandglass", "ft-everywhere"])
    sp.add_argument("--mono", action="store_true")
    sp.add_argument("--frames", type=int, default=192)
    sp.set_defaults(func=cmd_count)

    sp = sub.add_parser("bench", help="measure the offline real-time factor")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--duration", type=float)
    sp.add_argument("--repeats", type=int)
    sp.set_defaults(func=cmd_bench)

    return p


def main(argv=None):
    level = {"debug": logging.DEBUG, "info": logging.INFO, "quiet": logging.ERROR}.get(
        os.environ.get("LMFCA_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI contract: nonzero exit and a message, not a traceback
        if level == logging.DEBUG:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
