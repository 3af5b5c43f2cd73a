"""Command-line surface: data generation, training, evaluation, exports.

Exit codes: 0 success, 2 configuration error (bad config key, missing
checkpoint), 3 data error (missing/corrupt dataset).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .datagen import load_pair, pair_stream, read_manifest, write_dataset
from .exceptions import CheckpointError, ConfigError, DataError, SemAlignError
from .geometry import bilinear_sample, make_grid
from .metrics import (
    evaluate_pck,
    pck_report_rows,
    predict_flow,
    predict_landmarks,
    regress_landmarks,
    write_report,
)
from .model import image_to_tensor
from .trainer import init_state, load_checkpoint, pretrain, save_checkpoint, train_joint


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semalign",
        description="Joint semantic alignment and landmark discovery on toy data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in [
        ("gen-data", "generate a synthetic pair dataset on disk"),
        ("pretrain", "pretrain detector and aligner on synthetic warps"),
        ("train-joint", "alternating joint training from a pretrained checkpoint"),
        ("eval-pck", "keypoint transfer accuracy of a checkpoint"),
        ("eval-landmarks", "linear-regression landmark error of a checkpoint"),
        ("export-warps", "write qualitative warped-image panels"),
        ("export-plots", "write loss-curve and PCK-vs-alternation plots"),
    ]:
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", type=str, default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--checkpoint", type=str, default=None, help="checkpoint path")
    return parser


def _require(value, flag: str):
    if not value:
        raise ConfigError(f"missing required flag {flag}")
    return value


def _load_model(args):
    path = _require(args.checkpoint, "--checkpoint")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _test_pairs(cfg, limit=None):
    data_dir = _require(cfg["data_dir"], "config key data_dir")
    records = [r for r in read_manifest(data_dir) if r["split"] == "test"]
    if limit:
        records = records[:limit]
    return [load_pair(data_dir, r) for r in records]


def cmd_gen_data(args, cfg) -> int:
    out = Path(_require(args.out, "--out"))
    stream = cfgmod.stream_config(cfg, joint=cfg["appearance_change"])
    pairs = list(pair_stream(stream, args.seed, cfg["num_pairs"]))
    ratios = (cfg["split_train"], cfg["split_val"], cfg["split_test"])
    write_dataset(pairs, out, ratios=ratios, seed=args.seed)
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


def cmd_pretrain(args, cfg) -> int:
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    state = init_state(cfgmod.model_config(cfg), cfgmod.train_config(cfg), args.seed)
    pretrain(state, cfgmod.stream_config(cfg), cfg["pretrain_steps"], cfgmod.train_config(cfg))
    save_checkpoint(state, out / "pretrained.pt")
    _write_history(state, out / "pretrain_history.jsonl")
    print(f"pretrained {cfg['pretrain_steps']} steps -> {out / 'pretrained.pt'}")
    return 0


def cmd_train_joint(args, cfg) -> int:
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    state = _load_model(args)
    train_joint(
        state,
        cfgmod.stream_config(cfg, joint=True),
        cfg["alternations"],
        cfgmod.train_config(cfg),
        checkpoint_dir=out,
    )
    save_checkpoint(state, out / "joint.pt")
    _write_history(state, out / "train_history.jsonl")
    print(f"joint training done ({cfg['alternations']} alternations) -> {out / 'joint.pt'}")
    return 0


def cmd_eval_pck(args, cfg) -> int:
    state = _load_model(args)
    pairs = _test_pairs(cfg)
    report = evaluate_pck(state.model, pairs, cfgmod.parse_alphas(cfg))
    for alpha, value in zip(report.alphas, report.fractions):
        print(f"PCK@{alpha:g}: {value:.4f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_report(Path(args.out) / "pck.jsonl", pck_report_rows(report))
    return 0


def cmd_eval_landmarks(args, cfg) -> int:
    state = _load_model(args)
    data_dir = _require(cfg["data_dir"], "config key data_dir")
    records = read_manifest(data_dir)
    preds, gts, splits = [], [], []
    for rec in records:
        pair = load_pair(data_dir, rec)
        coords_s, coords_t = predict_landmarks(state.model, pair.image_s, pair.image_t)
        for coords, gt in ((coords_s, pair.landmarks_s), (coords_t, pair.landmarks_t)):
            preds.append(coords.numpy())
            gts.append(gt.numpy())
            splits.append(rec["split"])
    train_idx = [i for i, s in enumerate(splits) if s == "train"]
    test_idx = [i for i, s in enumerate(splits) if s == "test"]
    report = regress_landmarks(
        np.stack(preds),
        np.stack(gts),
        train_idx,
        test_idx,
        (cfg["reference_landmark_a"], cfg["reference_landmark_b"]),
    )
    print(f"landmark regression error: {report.mean_error:.4f} (K={report.k_used})")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        rows = [
            {
                "metric": "landmark_regression",
                "alpha": None,
                "value": report.mean_error,
                "category": "all",
                "n": len(test_idx),
            }
        ]
        write_report(Path(args.out) / "landmarks.jsonl", rows)
    return 0


def cmd_export_warps(args, cfg) -> int:
    from PIL import Image

    state = _load_model(args)
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    pairs = _test_pairs(cfg, limit=16)
    for pair in pairs:
        flow = predict_flow(state.model, pair.image_s, pair.image_t)
        H, W = pair.image_s.shape[:2]
        # Upsample the feature-grid flow to image resolution, then pull the
        # target image into the source frame.
        full = bilinear_sample(
            flow.permute(2, 0, 1), make_grid(H, W, dtype=flow.dtype)
        ).permute(1, 2, 0)
        warped = bilinear_sample(image_to_tensor(pair.image_t).double(), full)
        panel = np.concatenate(
            (
                pair.image_s,
                pair.image_t,
                (warped.permute(1, 2, 0).numpy().clip(0, 1) * 255).astype(np.uint8),
            ),
            axis=1,
        )
        Image.fromarray(panel).save(out / f"{pair.pair_id}_warp.png")
    print(f"wrote {len(pairs)} warp panels to {out}")
    return 0


def cmd_export_plots(args, cfg) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    state = _load_model(args)
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)

    history = state.loss_history
    fig, ax = plt.subplots(figsize=(7, 4))
    for phase in sorted({h["phase"] for h in history}):
        steps = [h["step"] for h in history if h["phase"] == phase]
        totals = [h["total"] for h in history if h["phase"] == phase]
        ax.plot(steps, totals, label=phase, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curve.png", dpi=120)
    plt.close(fig)

    # PCK per alternation: evaluate every per-phase checkpoint next to the
    # loaded one, falling back to the loaded checkpoint alone.
    alphas = cfgmod.parse_alphas(cfg)
    points = []
    ckpt_dir = Path(args.checkpoint).parent
    try:
        pairs = _test_pairs(cfg, limit=32)
    except (ConfigError, DataError):
        pairs = None
    if pairs:
        candidates = sorted(ckpt_dir.glob("alt*_detect.pt"))
        for path in candidates:
            st = load_checkpoint(path)
            rep = evaluate_pck(st.model, pairs, [alphas[0]])
            points.append((st.alternation, rep.fractions[0]))
        if not points:
            rep = evaluate_pck(state.model, pairs, [alphas[0]])
            points.append((state.alternation, rep.fractions[0]))
    fig, ax = plt.subplots(figsize=(5, 4))
    if points:
        xs, ys = zip(*sorted(points))
        ax.plot(xs, ys, marker="o")
    ax.set_xlabel("alternation")
    ax.set_ylabel(f"PCK@{alphas[0]:g}")
    fig.tight_layout()
    fig.savefig(out / "pck_vs_alternation.png", dpi=120)
    plt.close(fig)
    print(f"wrote plots to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-joint": cmd_train_joint,
    "eval-pck": cmd_eval_pck,
    "eval-landmarks": cmd_eval_landmarks,
    "export-warps": cmd_export_warps,
    "export-plots": cmd_export_plots,
}


def _write_history(state, path) -> None:
    with open(path, "w") as f:
        for row in state.loss_history:
            f.write(json.dumps(row) + "\n")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        cfg = cfgmod.load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except SemAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
