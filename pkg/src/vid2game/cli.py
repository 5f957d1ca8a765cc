"""Operator entry points.

Subcommands: synth-data, extract-pairs, train-p2p, train-p2f, rollout,
eval, serve.  Exit codes: 0 success, 1 runtime failure, 2 usage or config
error.  Each run echoes its effective configuration into the output
directory; evaluation and training runs also render matplotlib figures next
to their JSON/CSV outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from vid2game.config import ConfigError, make_run_config

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config value")
    parser.add_argument("--seed", type=int, default=None, help="shortcut for --set seed=N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vid2game")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic puppet dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--clips", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("extract-pairs", help="summarize training pairs of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train-p2p", help="train the next-pose network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="shortcut for --set max_steps=N")
    _add_common(p)

    p = sub.add_parser("train-p2f", help="train the frame renderer")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("rollout", help="drive a session offline and export frames")
    p.add_argument("--p2p", required=True)
    p.add_argument("--p2f", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--controls", required=True,
                   help="JSON: list of [dx, dy] or {'direction': [dx, dy], 'ticks': N}")
    p.add_argument("--seed-pose", required=True, help="seed pose PNG")
    p.add_argument("--seed-object", default=None, help="optional object channel PNG")
    p.add_argument("--background", required=True, help="PNG file or directory of PNGs")
    _add_common(p)

    p = sub.add_parser("eval", help="teacher-forced evaluation of a pose model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--scale", type=float, default=1.0,
                   help="multiply reported values (1000 for readability)")
    _add_common(p)

    p = sub.add_parser("serve", help="run the streaming session gateway")
    p.add_argument("--assets", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--out", default=None)
    _add_common(p)
    return parser


def _run_config(args, command: str, out_dir):
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "steps", None) is not None:
        overrides.append(f"max_steps={args.steps}")
    if getattr(args, "frames", None) is not None:
        overrides.append(f"frames={args.frames}")
    if getattr(args, "clips", None) is not None:
        overrides.append(f"clips={args.clips}")
    run = make_run_config(command, args.config, overrides, out_dir)
    run.dump()
    return run


def _train_config(run):
    from vid2game.p2p import TrainConfig

    return TrainConfig(
        lr=run["lr"], beta1=run["beta1"], beta2=run["beta2"], delta=run["delta"],
        epochs=run["epochs"], max_steps=run["max_steps"], batch_size=run["batch_size"],
        seed=run["seed"], width_mult=run["width_mult"], n_res=run["n_res"],
        norm=run["norm"], occlusion_prob=run["occlusion_prob"],
        occlusion_axes=tuple(run["occlusion_axes"]), log_every=run["log_every"],
        dump_every=run["dump_every"],
    )


def _backbone(run):
    from vid2game.netblocks import make_backbone

    return make_backbone(mode=run["backbone_mode"], seed=run["backbone_seed"],
                         weights_file=run["backbone_weights"])


def cmd_synth_data(args) -> int:
    from vid2game.puppet import WorldConfig, synth_clip

    run = _run_config(args, "synth-data", args.out)
    out = Path(args.out)
    config = WorldConfig(seed=run["seed"], size=run["resolution"], fps=run["fps"])
    if run["clips"] <= 1:
        synth_clip(out, frames=run["frames"], seed=run["seed"], config=config)
    else:
        for c in range(run["clips"]):
            synth_clip(out / f"clip{c:02d}", frames=run["frames"],
                       seed=run["seed"] + c, config=config)
    logger.info("wrote %d clip(s) of %d frames to %s", max(1, run["clips"]),
                run["frames"], out)
    return 0


def cmd_extract_pairs(args) -> int:
    from vid2game.dataio import build_dataset_pairs, load_dataset, mean_motion_magnitude
    from vid2game.report import render_loss_curves

    run = _run_config(args, "extract-pairs", args.out)
    clips = load_dataset(args.data)
    result = build_dataset_pairs(clips, run["delta"], run["pose_threshold"])
    controls = [[p.control.dx, p.control.dy] for p in result.pairs]
    summary = {
        "pairs": len(result.pairs),
        "dropped": result.dropped,
        "delta": run["delta"],
        "mean_motion_magnitude": mean_motion_magnitude(result.pairs),
        "controls": controls,
    }
    out = Path(args.out)
    (out / "pairs_summary.json").write_text(json.dumps(summary, indent=2))
    render_loss_curves(
        [{"step": i, "dx": c[0], "dy": c[1]} for i, c in enumerate(controls)],
        out / "controls.png", keys=("dx", "dy"))
    logger.info("%d pairs (%d dropped), mean motion %.3f px",
                summary["pairs"], summary["dropped"], summary["mean_motion_magnitude"])
    return 0


def cmd_train_p2p(args) -> int:
    from vid2game.dataio import build_dataset_pairs, load_dataset
    from vid2game.p2p import P2PLossWeights, train_p2p

    run = _run_config(args, "train-p2p", args.out)
    clips = load_dataset(args.data)
    pairs = build_dataset_pairs(clips, run["delta"], run["pose_threshold"])
    weights = P2PLossWeights(lambda_d=run["lambda_d"], lambda_vgg=run["lambda_vgg"])
    result = train_p2p(pairs.pairs, _train_config(run), args.out,
                       backbone=_backbone(run), weights=weights, fps=run["fps"])
    logger.info("checkpoint: %s (best epoch %d)", result.checkpoint_path, result.best_epoch)
    return 0


def cmd_train_p2f(args) -> int:
    from vid2game.dataio import load_dataset
    from vid2game.p2f import P2FLossWeights, train_p2f

    run = _run_config(args, "train-p2f", args.out)
    clips = load_dataset(args.data)
    weights = P2FLossWeights(lambda_d=run["lambda_d"],
                             lambda_backbone=run["lambda_backbone"],
                             lambda_mask=run["lambda_mask"])
    result = train_p2f(clips, _train_config(run), args.out,
                       backbone=_backbone(run), weights=weights, fps=run["fps"])
    logger.info("checkpoint: %s", result.checkpoint_path)
    return 0


def _load_controls(path) -> list:
    from vid2game.domain import Displacement2

    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        dx, dy = data["direction"]
        return [Displacement2(dx, dy)] * int(data["ticks"])
    return [Displacement2(dx, dy) for dx, dy in data]


def cmd_rollout(args) -> int:
    from vid2game.dataio import load_image
    from vid2game.engine import BackgroundProvider, create_session, rollout_offline

    run = _run_config(args, "rollout", args.out)
    del run  # settings archived; the rollout itself is checkpoint-driven
    pose = load_image(args.seed_pose, 3)
    if args.seed_object:
        obj = load_image(args.seed_object, 1)
    else:
        obj = np.zeros(pose.shape[:2] + (1,), dtype=np.float32)
    session = create_session(args.p2p, args.p2f, np.concatenate([pose, obj], axis=2),
                             BackgroundProvider.from_path(args.background))
    manifest = rollout_offline(session, _load_controls(args.controls), args.out)
    logger.info("wrote %d frames to %s", manifest["count"], args.out)
    return 0


def cmd_eval(args) -> int:
    from vid2game.dataio import build_dataset_pairs, load_dataset
    from vid2game.metrics import teacher_forced_eval
    from vid2game.p2p import P2PModel
    from vid2game.report import (render_report_figure, save_report_csv,
                                 save_report_json)

    report_path = Path(args.report)
    run = _run_config(args, "eval", report_path.parent)
    model, extra = P2PModel.load(args.model)
    clips = load_dataset(args.data)
    pairs = build_dataset_pairs(clips, extra.get("delta", run["delta"]),
                                run["pose_threshold"])
    report = teacher_forced_eval(
        model, pairs.pairs, _backbone(run), scale=args.scale,
        metadata={"model_id": str(args.model), "clip_id": str(args.data)})
    save_report_json(report, report_path)
    save_report_csv(report, report_path.with_suffix(".csv"))
    render_report_figure(report, report_path.with_suffix(".png"))
    for name, series in report.metrics.items():
        logger.info("%s: %.5g ± %.5g", name, series.mean, series.std)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from vid2game.gateway import create_app

    run = _run_config(args, "serve", args.out)
    del run
    app = create_app(args.assets)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


_HANDLERS = {
    "synth-data": cmd_synth_data,
    "extract-pairs": cmd_extract_pairs,
    "train-p2p": cmd_train_p2p,
    "train-p2f": cmd_train_p2f,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def dispatch(argv) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure
        logger.error("%s failed: %s", args.command, err)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
