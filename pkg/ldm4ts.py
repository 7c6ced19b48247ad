#!/usr/bin/env python3
"""
Command-line entry point.

Commands:
    transform        render look-back windows as PNGs plus an index CSV
    train            pretrain the autoencoder, train jointly, save a checkpoint
    forecast         forecast from the final look-back window (or every window)
    eval             test-split MSE/MAE per horizon
    calibrate-scale  print the latent scale s

Exit codes: 0 success, 2 configuration/input error (bad config, missing
file, unreadable CSV, usage error), 3 runtime failure.

Usage:
    python ldm4ts.py transform --input toy.csv --seq-len 96 --period 24 --out imgs/
    python ldm4ts.py train --config toy_config.json --input toy.csv --out runs/toy
    python ldm4ts.py eval --checkpoint runs/toy/checkpoint.pt --input toy.csv --out runs/toy
"""

import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
import torch

from encode_images import VisionConfig, build_images, export_png
from errors import ConfigurationError, FormatError, ParseError, ValidationError
from model_config import TrainConfig, load_config, load_environment
from numerics import RngStream, set_precision
from run_pipeline import (banner, build_model, calibrate_latent_scale, evaluate, fit, forecast,
                          load_checkpoint, prepare_frame, pretrain_vae, resolve_period, split_spec_for)
from series_data import all_windows, apply_scaler, load_csv, make_windows

COMMANDS = ("transform", "train", "forecast", "eval", "calibrate-scale")
INPUT_ERRORS = (ConfigurationError, FormatError, ParseError, ValidationError, FileNotFoundError)


def build_parser():
    import argparse

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Flat JSON config file with dotted keys")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="Sets train.seed")
    common.add_argument("--out", default="out", help="Output directory")
    common.add_argument("--input", help="Input CSV with a 'date' column")
    common.add_argument("--seq-len", type=int, help="Sets data.seq_len")
    common.add_argument("--pred-len", type=int, help="Sets data.pred_len")
    common.add_argument("--period", help="Sets vision.period (an integer or 'auto')")
    common.add_argument("--sampler", choices=["ddim", "ddpm"], help="Sets diffusion.use_ddim")
    common.add_argument("--steps", type=int, help="Sets diffusion.inference_steps")
    common.add_argument("--checkpoint", action="append", default=[],
                        help="Checkpoint file (repeat for several horizons in eval)")

    parser = argparse.ArgumentParser(prog="ldm4ts", description="Latent diffusion forecaster for time series")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def flag_overrides(args) -> List:
    pairs = []
    if args.seed is not None:
        pairs.append(("train.seed", args.seed))
    if args.seq_len is not None:
        pairs.append(("data.seq_len", args.seq_len))
    if args.pred_len is not None:
        pairs.append(("data.pred_len", args.pred_len))
    if args.period is not None:
        pairs.append(("vision.period", args.period if args.period == "auto" else _int(args.period, "--period")))
    if args.sampler is not None:
        pairs.append(("diffusion.use_ddim", args.sampler == "ddim"))
    if args.steps is not None:
        pairs.append(("diffusion.inference_steps", args.steps))
    return pairs


def _int(value: str, flag: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"{flag} expects an integer or 'auto', got {value!r}") from None


def _require_input(args) -> str:
    if not args.input:
        raise ConfigurationError(f"'{args.command}' needs --input")
    return args.input


def _sampler(cfg) -> str:
    return "ddim" if cfg["diffusion.use_ddim"] else "ddpm"


def cmd_transform(args, cfg, env):
    frame = load_csv(_require_input(args), name=cfg["data.name"])
    scaled, spec, _ = prepare_frame(frame, cfg)
    vision = VisionConfig.from_config(cfg, period=resolve_period(scaled, spec, cfg))
    stream = all_windows(frame, cfg["data.seq_len"], 0, split="all")
    out = Path(args.out)

    rows = []
    batch_size = cfg["train.batch_size"]
    for start in range(0, len(stream), batch_size):
        indices = list(range(start, min(start + batch_size, len(stream))))
        batch = stream.to_batch(indices)
        images = build_images(batch.X, vision, cfg["data.norm_const"])
        export_png(images, out, split="all", start_index=start)
        for i, origin in zip(indices, batch.origins):
            rows.append({"index": i, "origin": origin,
                         "start": frame.timestamps[origin],
                         "end": frame.timestamps[origin + stream.L - 1],
                         "rgb": f"all_{i}_rgb.png"})
    pd.DataFrame(rows, columns=["index", "origin", "start", "end", "rgb"]).to_csv(out / "index.csv", index=False)
    print(f"✅ Wrote {len(rows)} images (period {vision.period}) to {out}")


def cmd_train(args, cfg, env):
    frame = load_csv(_require_input(args), name=cfg["data.name"])
    fit(frame, cfg, Path(args.out), env["num_workers"])


def _load_for_inference(args, frame_path: str):
    if not args.checkpoint:
        raise ConfigurationError(f"'{args.command}' needs --checkpoint")
    model, meta = load_checkpoint(args.checkpoint[0])
    frame = load_csv(frame_path, expected_dims=model.n_features, name=model.cfg["data.name"])
    if meta["scaler"] is not None:
        frame = apply_scaler(frame, meta["scaler"])
    return model, meta, frame


def cmd_forecast(args, cfg, env):
    model, meta, frame = _load_for_inference(args, _require_input(args))
    if cfg["forecast.every_window"]:
        stream = all_windows(frame, model.seq_len, 0, split="forecast")
        X = stream.to_batch().X
    else:
        if frame.n_rows < model.seq_len:
            raise ValidationError(f"Input has {frame.n_rows} rows but the model needs {model.seq_len}")
        X = frame.values[-model.seq_len:].unsqueeze(0)

    result = forecast(model, X, seed=cfg["train.seed"], sampler=_sampler(cfg),
                      steps=cfg["diffusion.inference_steps"], batch_size=cfg["train.batch_size"])
    Y_hat = result.Y_hat
    if meta["scaler"] is not None:
        flat = meta["scaler"].inverse_transform(Y_hat.reshape(-1, model.n_features).cpu().numpy())
        Y_hat = torch.as_tensor(flat).reshape(Y_hat.shape)

    names = meta["feature_names"] or [f"f{d}" for d in range(model.n_features)]
    rows = [{"index": b, "step": h + 1, "feature": names[d], "value": float(Y_hat[b, h, d])}
            for b in range(Y_hat.shape[0]) for h in range(Y_hat.shape[1]) for d in range(Y_hat.shape[2])]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=["index", "step", "feature", "value"]).to_csv(out / "forecast.csv", index=False)
    if cfg["vision.save_images"]:
        export_png(model.images(X), out / "images", split="forecast")

    t = result.timings
    print(f"📊 Mean gate {result.gate_mean:.4f}; {t['per_batch_ms']:.1f} ms/batch, {t['per_sample_ms']:.1f} ms/sample")
    print(f"✅ Wrote {len(rows)} forecast values to {out / 'forecast.csv'}")


def cmd_eval(args, cfg, env):
    path = _require_input(args)
    if not args.checkpoint:
        raise ConfigurationError("'eval' needs --checkpoint")
    models, first = {}, None
    for ckpt in args.checkpoint:
        model, meta = load_checkpoint(ckpt)
        if model.pred_len in models:
            raise ConfigurationError(f"Two checkpoints share horizon {model.pred_len}")
        models[model.pred_len] = model
        first = first or (model, meta)
    missing = [h for h in cfg["data.horizons"] if h not in models]
    if missing:
        print(f"⚠️  No checkpoint for configured horizons {missing}")

    model, meta = first
    frame = load_csv(path, expected_dims=model.n_features, name=model.cfg["data.name"])
    if meta["scaler"] is not None:
        frame = apply_scaler(frame, meta["scaler"])
    evaluate(models, frame, split_spec_for(model.cfg), seed=cfg["train.seed"], sampler=_sampler(cfg),
             steps=cfg["diffusion.inference_steps"], batch_size=cfg["train.batch_size"],
             out_path=Path(args.out) / "metrics.csv")


def cmd_calibrate_scale(args, cfg, env):
    tcfg = TrainConfig.from_config(cfg, env["num_workers"])
    rng = RngStream(tcfg.seed, "calibrate-scale")
    if args.checkpoint:
        model, _, frame = _load_for_inference(args, _require_input(args))
        spec = split_spec_for(model.cfg)
    else:
        frame = load_csv(_require_input(args), name=cfg["data.name"])
        frame, spec, _ = prepare_frame(frame, cfg)
        model = build_model(cfg, frame.n_features, resolve_period(frame, spec, cfg))
    train_s, val_s, _ = make_windows(frame, spec, model.seq_len, model.pred_len)
    if not args.checkpoint:
        banner("Autoencoder pretraining")
        pretrain_vae(model.vae, train_s, val_s, model.vision, model.norm_const, tcfg, rng.spawn("vae"))
    s = calibrate_latent_scale(model, train_s, rng.spawn("sample"))
    print(f"s = {s:.6f}")


HANDLERS = {
    "transform": cmd_transform,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "eval": cmd_eval,
    "calibrate-scale": cmd_calibrate_scale,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse argv, echo the effective config, run the command; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        env = load_environment()
        cfg = load_config(args.config, list(args.set) + flag_overrides(args))
        banner(f"{args.command}: effective configuration")
        for line in cfg.echo_lines():
            print(line)
        print(flush=True)
        set_precision(cfg["numerics.precision"])
        HANDLERS[args.command](args, cfg, env)
    except INPUT_ERRORS as e:
        print(f"\n❌ {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"\n❌ {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


def main():
    sys.stdout.reconfigure(line_buffering=True)
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
