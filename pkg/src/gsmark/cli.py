"""Command-line pipeline driver.

Subcommands mirror the pipeline stages: synth, prune, features, select,
embed, render, attack, decode, eval, report.  Exit codes: 0 success,
2 configuration error, 3 data/parse error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from gsmark import codec, evalkit, experts, pipeline, pruning, sbag
from gsmark.codec import Message
from gsmark.config import Config, ConfigurationError
from gsmark.model import (DataError, ParseError, load_cameras, load_model,
                          save_cameras, save_ply)
from gsmark.render import render

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERIFY = 4


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.codec.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_image(img: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _message_from_args(args, cfg: Config) -> Message:
    if args.message:
        return Message.from_hex(args.message, cfg.codec.message_bits)
    return Message.random(cfg.codec.message_bits,
                          np.random.default_rng(cfg.codec.seed))


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model, cameras = evalkit.make_synthetic_scene(
        n_gaussians=args.n_gaussians, n_cameras=args.n_views,
        resolution=args.resolution, seed=args.seed or 0, rig=args.rig)
    save_ply(model, out / "scene.ply")
    save_cameras(cameras, out / "cameras.json")
    print(f"wrote {out / 'scene.ply'} ({len(model)} gaussians, "
          f"{len(cameras)} views)")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    cameras = load_cameras(args.cameras)
    pruned, kept = pruning.prune_by_contribution(
        model, cameras, cfg.eval.prune_threshold)
    save_ply(pruned, out / "pruned.ply")
    print(f"kept {len(kept)} of {len(model)} gaussians")
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    nbrs = experts.knn(model.positions,
                       min(cfg.experts.k_neighbors, len(model) - 1))
    features = experts.compute_features(model, nbrs, cfg.experts)
    ev = experts.evidence(features, nbrs, cfg.experts)
    experts.export_csv(out / "features.csv", features, ev)
    print(f"wrote {out / 'features.csv'} for {len(model)} gaussians")
    return EXIT_OK


def cmd_select(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    cameras = load_cameras(args.cameras)
    train_cams, _ = pipeline.split_cameras(cameras, cfg)
    new_model, plan = sbag.build_carrier_plan(
        model, train_cams, cfg.codec.message_bits, cfg.sbag, cfg.experts)
    save_ply(new_model, out / "selected.ply")
    plan.save(out / "plan.txt")
    print(f"budget {plan.budget_B}, carriers "
          f"{len(new_model.wm_indices)} of {len(new_model)}")
    return EXIT_OK


def cmd_embed(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    cameras = load_cameras(args.cameras)
    message = _message_from_args(args, cfg)
    result = pipeline.embed(model, cameras, message, cfg,
                            threads=args.threads)
    save_ply(result.model, out / "watermarked.ply")
    result.plan.save(out / "plan.txt")
    if result.manifest is not None:
        result.manifest.save(out / "manifest.yaml")
    (out / "message.txt").write_text(message.to_hex() + "\n")
    cfg.save(out / "config.yaml")
    logits = result.align_report.logits_after
    acc = codec.bit_accuracy(logits, message)
    print(f"message {message.to_hex()} embedded; clean bit accuracy "
          f"{acc:.4f}, min |logit| {np.abs(logits).min():.3f}")
    return EXIT_OK


def cmd_render(args) -> int:
    _load_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    cameras = load_cameras(args.cameras)
    for i, cam in enumerate(cameras):
        img = render(model, cam, threads=args.threads).image
        _save_image(img, out / f"view_{i:03d}.png")
    print(f"rendered {len(cameras)} views to {out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    _load_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    rng = np.random.default_rng(args.seed or 0)
    attacked = evalkit.model_attack(model, args.kind, args.strength, rng)
    save_ply(attacked, out / "attacked.ply")
    print(f"{args.kind} ({args.strength}) -> {len(attacked)} gaussians")
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = _load_config(args)
    model = load_model(args.model)
    cameras = load_cameras(args.cameras)
    decoder = codec.decoder_from_config(cfg.codec)
    images = [render(model, cam, threads=args.threads).image
              for cam in cameras]
    logits = evalkit.decode_views(decoder, images)
    bits = (logits > 0).astype(int)
    decoded = Message(bits)
    print(f"decoded {decoded.to_hex()}")
    if args.message:
        message = Message.from_hex(args.message, cfg.codec.message_bits)
        acc = codec.bit_accuracy(logits, message)
        print(f"bit accuracy vs expected: {acc:.4f}")
        if acc < args.min_bitacc:
            print(f"verification FAILED: {acc:.4f} < {args.min_bitacc}")
            return EXIT_VERIFY
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    cameras = load_cameras(args.cameras)
    decoder = codec.decoder_from_config(cfg.codec)
    message = _message_from_args(args, cfg)
    references = None
    if args.reference:
        ref_model = load_model(args.reference)
        references = [render(ref_model, cam, threads=args.threads).image
                      for cam in cameras]
    rows = evalkit.run_attack_matrix(
        model, cameras, decoder, message, references=references,
        seed=args.seed or 0, codec_cfg=cfg.codec, eval_cfg=cfg.eval,
        threads=args.threads)
    evalkit.write_attack_csv(rows, out / "attacks.csv")
    _print_rows(rows)
    clean = next(r for r in rows if r["attack"] == "none")
    if clean["bit_acc"] < args.min_bitacc:
        print(f"verification FAILED: clean bit accuracy "
              f"{clean['bit_acc']:.4f} < {args.min_bitacc}")
        return EXIT_VERIFY
    return EXIT_OK


def _print_rows(rows) -> None:
    print(f"{'attack':<10} {'param':<28} {'bit_acc':>8} "
          f"{'psnr':>8} {'ssim':>8}")
    for r in rows:
        print(f"{r['attack']:<10} {r['param']:<28} {r['bit_acc']:>8.4f} "
              f"{r['psnr']:>8.2f} {r['ssim']:>8.4f}")
    mean_acc = float(np.mean([r["bit_acc"] for r in rows]))
    print(f"mean bit accuracy {mean_acc:.4f}")


def cmd_report(args) -> int:
    import csv as _csv
    rows = []
    with open(args.csv) as fh:
        for rec in _csv.DictReader(fh):
            rows.append({"attack": rec["attack"], "param": rec["param"],
                         "bit_acc": float(rec["bit_acc"]),
                         "psnr": float(rec["psnr"]),
                         "ssim": float(rec["ssim"])})
    if not rows:
        raise DataError("attack report is empty")
    _print_rows(rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsmark",
        description="Watermark embedding and verification for 3D Gaussian "
                    "Splatting models")
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", default="gsmark_out")
    parser.add_argument("--threads", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic test scene")
    p.add_argument("--n-gaussians", type=int, default=350)
    p.add_argument("--n-views", type=int, default=10)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--rig", choices=("ring", "arc"), default="arc")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prune", help="drop never-visible gaussians")
    p.add_argument("--model", required=True)
    p.add_argument("--cameras", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("features", help="export expert features as CSV")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("select", help="select and densify carriers")
    p.add_argument("--model", required=True)
    p.add_argument("--cameras", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("embed", help="run the full embedding pipeline")
    p.add_argument("--model", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--message", help="message as a hex string")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("render", help="render views to PNG")
    p.add_argument("--model", required=True)
    p.add_argument("--cameras", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("attack", help="model-space attack")
    p.add_argument("--model", required=True)
    p.add_argument("--kind", choices=evalkit.MODEL_ATTACKS, required=True)
    p.add_argument("--strength", type=float, default=0.2)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("decode", help="decode the message from renders")
    p.add_argument("--model", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--message", help="expected message hex for verification")
    p.add_argument("--min-bitacc", type=float, default=0.0)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="full attack matrix with metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--reference", help="pre-watermark model for PSNR/SSIM")
    p.add_argument("--message", help="expected message hex")
    p.add_argument("--min-bitacc", type=float, default=0.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="pretty-print an attack CSV")
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
