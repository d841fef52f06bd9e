"""Command-line entry point: ``rlasc <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .codec import BitstreamError, deserialize, rate_psi, serialize
from .core import RngStream
from .criterion import PerceptualExtractor, make_report, miou_loss, perceptual_loss
from .harness import bd_metric, run_rd_sweep
from .harness.channel import ChannelSpec, transmit_bitstream
from .harness.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .harness.config import ExperimentConfig
from .harness.experiment import eval_set, run_stage1, run_stage2, run_stage3, task_oracle, \
    train_set
from .harness.sweep import CSV_FIELDS, policy_levels, rows_to_csv
from .pipeline import decode_bitstream, encode_image
from .semantic import SceneSample, read_pgm, read_ppm, write_pgm, write_ppm
from .training import StageOrderError

log = logging.getLogger("rlasc")


class UsageError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _write(out: str | None, text: str) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _require_out(args, what: str) -> Path:
    if not args.out:
        raise UsageError(f"--out is required ({what})")
    return Path(args.out)


def _load_pair(image: str, labels: str) -> SceneSample:
    x, s = read_ppm(image), read_pgm(labels)
    if x.shape[1:] != s.shape:
        raise ValueError(f"image is {x.shape[2]}x{x.shape[1]} but labels are "
                         f"{s.shape[1]}x{s.shape[0]}")
    return SceneSample(x, s)


def _levels(args, model, sample, policy, oracle, extractor, cfg) -> list[int]:
    if args.levels:
        levels = [int(v) for v in args.levels.split(",")]
        if len(levels) != model.M:
            raise UsageError(f"--levels needs {model.M} values, got {len(levels)}")
        return levels
    return policy_levels(args.policy, model, sample, policy, oracle, extractor, cfg.weights)


# --- commands -------------------------------------------------------------
def cmd_gen_data(args, cfg):
    out = _require_out(args, "output directory")
    out.mkdir(parents=True, exist_ok=True)
    samples = train_set(replace(cfg, dataset_size=args.count))
    for i, s in enumerate(samples):
        write_ppm(out / f"scene_{i:04d}.ppm", s.image)
        write_pgm(out / f"scene_{i:04d}.pgm", s.labels)
    print(f"wrote {len(samples)} scenes to {out}")


def cmd_train_stage1(args, cfg):
    out = _require_out(args, "checkpoint path")
    if args.steps is not None:
        cfg = replace(cfg, stage1_steps=args.steps)
    if args.lr is not None:
        cfg = replace(cfg, stage1_lr=args.lr)
    model, history = run_stage1(cfg, n=args.n)
    save_checkpoint(out, model)
    Path(str(out) + ".log.csv").write_text(rows_to_csv(history.rows))
    lp = history.column("L_P")
    print(f"stage1: L_P {lp[0]:.5f} -> {lp[-1]:.5f}; saved {out}")


def cmd_train_agent(args, cfg):
    out = _require_out(args, "checkpoint path")
    if args.episodes is not None:
        cfg = replace(cfg, episodes=args.episodes)
    if args.alpha is not None:
        cfg = replace(cfg, alpha=args.alpha)
    model, _, _ = load_checkpoint(args.checkpoint)
    if model.stage < 1:
        raise StageOrderError("checkpoint has not been through Stage I")
    policy, history, _ = run_stage2(cfg, model)
    save_checkpoint(out, model, policy)
    Path(str(out) + ".log.csv").write_text(rows_to_csv(history.rows))
    means = history.epoch_means()
    print(f"stage2: mean G {means[0]['G']:.5f} -> {means[-1]['G']:.5f}; saved {out}")


def cmd_finetune(args, cfg):
    out = _require_out(args, "checkpoint path")
    if args.steps is not None:
        cfg = replace(cfg, stage3_steps=args.steps)
    model, policy, _ = load_checkpoint(args.checkpoint)
    if policy is None:
        raise StageOrderError("checkpoint has no trained policy; run train-agent first")
    model, policy, history = run_stage3(cfg, model, policy)
    save_checkpoint(out, model, policy)
    Path(str(out) + ".log.csv").write_text(rows_to_csv(history.rows))
    print(f"stage3: {len(history.rows)} steps; saved {out}")


def cmd_encode(args, cfg):
    out = _require_out(args, ".rlsc path")
    model, policy, _ = load_checkpoint(args.checkpoint)
    sample = _load_pair(args.image, args.labels)
    levels = _levels(args, model, sample, policy, task_oracle(cfg), PerceptualExtractor(), cfg)
    bs = encode_image(model, sample.image, sample.labels, levels)
    data = serialize(bs)
    out.write_bytes(data)
    print(json.dumps({"levels": levels, "bits": bs.label_bits() + bs.payload_bits(),
                      "bpp": rate_psi(bs), "bytes": len(data)}))


def cmd_decode(args, cfg):
    out = _require_out(args, "output PPM")
    model, _, _ = load_checkpoint(args.checkpoint)
    bs = deserialize(Path(args.input).read_bytes())
    channel = ChannelSpec("awgn", args.snr) if args.snr is not None else cfg.channel_spec
    if channel.kind != "lossless":
        bs = transmit_bitstream(bs, channel, RngStream(cfg.seed, 0xC4A7).generator())
    dec = decode_bitstream(model, bs)
    write_ppm(out, dec.image)
    if args.labels_out:
        write_pgm(args.labels_out, dec.labels)
    print(json.dumps({"width": bs.W, "height": bs.H, "bpp": rate_psi(bs),
                      "corrupted_segments": dec.corrupted_segments,
                      "label_map_damaged": dec.label_map_damaged}))


def cmd_eval(args, cfg):
    model, policy, _ = load_checkpoint(args.checkpoint)
    sample = _load_pair(args.image, args.labels)
    oracle, extractor = task_oracle(cfg), PerceptualExtractor()
    levels = _levels(args, model, sample, policy, oracle, extractor, cfg)
    bs = encode_image(model, sample.image, sample.labels, levels)
    x_hat = decode_bitstream(model, deserialize(serialize(bs))).image
    report = make_report(rate_psi(bs),
                         miou_loss(oracle.segment(sample.image), oracle.segment(x_hat), model.M),
                         perceptual_loss(sample.image, x_hat, extractor), cfg.weights)
    _write(args.out, json.dumps(report.as_dict(), indent=2) + "\n")


def cmd_sweep(args, cfg):
    checkpoints = {}
    for item in args.checkpoint:
        if "=" not in item:
            raise UsageError(f"--checkpoint expects N=PATH, got {item!r}")
        n, path = item.split("=", 1)
        checkpoints[int(n)] = path
    samples = eval_set(cfg, args.count)
    result = run_rd_sweep(checkpoints, samples, task_oracle(cfg), channel=cfg.channel_spec,
                          seed=cfg.seed)
    _write(args.out, rows_to_csv(result.rows, CSV_FIELDS))


def _read_curve(path: str, metric: str, policy: str | None, mode: int | None):
    import csv
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if policy:
        # "uniform" selects every uniform-q row
        rows = [r for r in rows if r.get("policy", "").startswith(policy)]
    if mode is not None:
        rows = [r for r in rows if r.get("mode") == str(mode)]
    if not rows or metric not in rows[0]:
        raise ValueError(f"{path}: no rows with a {metric!r} column")
    return (np.array([float(r["bpp"]) for r in rows]),
            np.array([float(r[metric]) for r in rows]))


def cmd_bd(args, cfg):
    a = _read_curve(args.curve_a, args.metric, args.policy, args.n)
    b = _read_curve(args.curve_b, args.metric, args.policy, args.n)
    modes = ["bd-rate", "bd-quality"] if args.mode == "both" else [args.mode]
    rows = [{"metric": args.metric, "mode": m, "value": bd_metric(a, b, m)} for m in modes]
    _write(args.out, rows_to_csv(rows))


# --- parser ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--config", help="key = value experiment config file")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rlasc", description="Semantic image codec toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-data", cmd_gen_data, "write synthetic PPM/PGM scene pairs")
    sp.add_argument("--count", type=int, default=16)

    sp = add("train-stage1", cmd_train_stage1, "train encoder, decoder and discriminator")
    sp.add_argument("--n", type=int, default=None, help="feature channels (mode)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("train-agent", cmd_train_agent, "train the bit-allocation policy")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--alpha", type=float)

    sp = add("finetune", cmd_finetune, "jointly fine-tune codec and policy")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--steps", type=int)

    for name, func, help_ in (("encode", cmd_encode, "PPM + PGM -> .rlsc"),
                              ("eval", cmd_eval, "print the criterion report as JSON")):
        sp = add(name, func, help_)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--image", required=True, help="PPM image")
        sp.add_argument("--labels", required=True, help="PGM label map")
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--policy", default="learned",
                       choices=["learned"] + [f"uniform-{q}" for q in range(1, 7)])
        g.add_argument("--levels", help="comma-separated level per class")

    sp = add("decode", cmd_decode, ".rlsc -> PPM (and optional PGM labels)")
    sp.add_argument("input")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--labels-out")
    sp.add_argument("--snr", type=float, help="send through an AWGN channel at this SNR (dB)")

    sp = add("sweep", cmd_sweep, "rate sweep over modes and policies (CSV)")
    sp.add_argument("--checkpoint", action="append", required=True, metavar="N=PATH")
    sp.add_argument("--count", type=int, default=None, help="evaluation images")

    sp = add("bd", cmd_bd, "Bjontegaard deltas between two sweep CSVs")
    sp.add_argument("curve_a")
    sp.add_argument("curve_b")
    sp.add_argument("--metric", default="miou")
    sp.add_argument("--policy", help="only use rows whose policy starts with this")
    sp.add_argument("--n", type=int, help="only use rows of this mode")
    sp.add_argument("--mode", default="both", choices=["bd-rate", "bd-quality", "both"])
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"rlasc: error: {e}", file=sys.stderr)
        return 2
    except (BitstreamError, CheckpointError, StageOrderError, OSError, ValueError) as e:
        print(f"rlasc: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
