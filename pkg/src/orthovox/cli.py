"""``orthovox`` command line: synth | train | eval | infer | bench.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_config
from .hdn import gt_boxes
from .metrics import FrameResult, evaluate
from .nncore import CheckpointError, TrainingError
from .synthgen import SceneFileError, SceneGenerationError, generate_frames, read_scene, write_scene
from .volume import TensorFileError

log = logging.getLogger("orthovox")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides train.seed (and the synth seed)")
    p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread cap")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, byte-reproducible run")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="orthovox", description="Orthographic-projection multi-view 3D pose pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    _common(p)
    p.add_argument("--out", required=True, help="scene directory")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--no-heatmaps", action="store_true", help="store poses only; heatmaps re-render on read")

    p = sub.add_parser("train", help="train HDN and JLN jointly")
    _common(p)
    p.add_argument("--scenes", required=True, help="training scene directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")

    for name, text in (("eval", "evaluate a checkpoint on a scene"), ("infer", "write per-frame boxes and poses")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--scenes", required=True)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("bench", help="cost sweeps (CSV + SVG)")
    _common(p)
    p.add_argument("--checkpoint", help="trained weights (optional: random weights time the same)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sweep", choices=("granularity", "persons", "cameras", "all"), default="all")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--no-plots", action="store_true")
    return parser


# --------------------------------------------------------------------------

def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train"] = {"seed": args.seed}
    if getattr(args, "epochs", None) is not None:
        overrides.setdefault("train", {})["epochs"] = args.epochs
    return load_config(args.config, overrides=overrides)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    cfg = _config(args)
    seed = cfg.train.seed
    sc = cfg.scene_config()
    frames = generate_frames(sc, seed, args.frames)
    root = write_scene(args.out, sc, seed, frames, store_heatmaps=not args.no_heatmaps,
                       extra={"config_digest": cfg.digest()})
    print(f"wrote {args.frames} frames to {root}")
    return EXIT_OK


def _scene_cfg(cfg: RunConfig, scene) -> RunConfig:
    """Space and camera settings follow the scene file."""
    d = cfg.to_dict()
    sp = scene.config.space
    d["space"] = {"origin": list(sp.origin), "extent": list(sp.extent), "resolution": list(sp.resolution)}
    return RunConfig.from_dict(d)


def cmd_train(args) -> int:
    from .training import Trainer, prepare_dataset, resume_trainer

    scene = read_scene(args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        from .nncore import load_checkpoint
        from .training import checkpoint_config
        cfg = checkpoint_config(load_checkpoint(args.checkpoint))
        if args.epochs is not None:
            cfg.train.epochs = args.epochs
    else:
        cfg = _scene_cfg(_config(args), scene)
    log.info("config digest %s; preparing %d frames", cfg.digest(), len(scene))
    data = prepare_dataset(scene.frames(), scene.cameras, cfg)
    if args.checkpoint:
        trainer = resume_trainer(args.checkpoint, data)
        trainer.cfg = cfg
    else:
        trainer = Trainer(cfg, data)
    log_path = out / "train_log.jsonl"
    with open(log_path, "a") as fh:
        def on_step(epoch, batch, comp):
            fh.write(json.dumps({"epoch": epoch, "batch": batch, **comp, "config_digest": cfg.digest()}) + "\n")
        trainer.fit(checkpoint_dir=out, on_step=on_step)
    _write_json(out / "history.json", {"config_digest": cfg.digest(), "config": cfg.to_dict(),
                                       "epochs": trainer.history})
    for h in trainer.history:
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in h.items()))
    return EXIT_OK


def _run_scene(args):
    from .pipeline import infer_frame
    from .training import load_models

    models, cfg = load_models(args.checkpoint)
    scene = read_scene(args.scenes)
    space = scene.config.space
    rows = []
    for fr in scene.frames():
        dets, poses = infer_frame(fr.heatmaps, scene.cameras, space, models, cfg)
        rows.append((fr, dets, poses))
    return cfg, scene, rows


def cmd_eval(args) -> int:
    cfg, _, rows = _run_scene(args)
    results = [FrameResult([p.joints for p in poses], [d.score for d in dets], dets, fr.poses,
                           gt_boxes(fr.poses, margin=cfg.hdn.margin_mm)) for fr, dets, poses in rows]
    rep = evaluate(results, cfg.eval.ap_thresholds, cfg.eval.match_radius_mm, cfg.eval.pcp_variant,
                   config_digest=cfg.digest())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(rep.to_text() + "\n")
    (out / "report.csv").write_text(rep.to_csv())
    print(rep.to_text())
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, _, rows = _run_scene(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    lines = ["frame_id,person_id,score,center_x_mm,center_y_mm,center_z_mm,size_x_mm,size_y_mm,config_digest"]
    for fr, dets, poses in rows:
        frames.append({"frame_id": fr.frame_id,
                       "detections": [d.to_dict() for d in dets],
                       "poses": [p.to_dict(n) for n, p in enumerate(poses)]})
        for n, d in enumerate(dets):
            c, s = d.center, d.size_xy
            lines.append(f"{fr.frame_id},{n},{d.score:.6f},{c[0]:.3f},{c[1]:.3f},{c[2]:.3f},"
                         f"{s[0]:.3f},{s[1]:.3f},{cfg.digest()}")
    _write_json(out / "poses.json", {"config_digest": cfg.digest(), "frames": frames})
    (out / "detections.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import benchkit
    from .plots import plot_sweep

    if args.checkpoint:
        from .training import load_models
        models, cfg = load_models(args.checkpoint)
    else:
        from .pipeline import build_models
        cfg = _config(args)
        models = build_models(cfg)
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = 1 if args.deterministic or args.threads is None else args.threads
    sweeps = ("granularity", "persons", "cameras") if args.sweep == "all" else (args.sweep,)
    report = benchkit.CostReport(config_digest=cfg.digest())
    for s in sweeps:
        fn = getattr(benchkit, f"sweep_{s}")
        part = fn(cfg, models, runs=args.runs, threads=threads)
        report.points += part.points
        if not args.no_plots:
            plot_sweep(part, s, out / f"{s}.svg")
    (out / "bench.csv").write_text(report.to_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = 1 if args.deterministic else args.threads
    try:
        with threadpool_limits(threads):
            return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"orthovox: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SceneFileError, SceneGenerationError, CheckpointError, TensorFileError, FileNotFoundError) as exc:
        print(f"orthovox: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"orthovox: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
