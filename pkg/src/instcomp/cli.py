"""Command line entry point.

Failures print one line ``error[<category>]: <message>`` to stderr and exit
with the category's code.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline as P
from .network import Model
from .scene_synth import load_scene
from .tensor import ShapeError

EXIT_CODES = {"error": 1, "usage": 2, "config": 3, "data": 4, "io": 5, "nonfinite_loss": 6, "shape": 7}


class _UsageError(P.PipelineError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_model(path) -> tuple[Model, dict]:
    try:
        return Model.load(path)
    except FileNotFoundError as e:
        raise _io(e)
    except (ValueError, KeyError) as e:
        raise P.DataError(f"{path}: unreadable checkpoint ({e})") from e


def _io(e: OSError) -> P.PipelineError:
    err = P.PipelineError(f"{getattr(e, 'filename', '')}: {e.strerror or e}")
    err.category = "io"
    return err


def _infer_config(header: dict) -> P.InferConfig:
    d = header.get("experiment", {}).get("infer", {})
    return P.InferConfig(**d)


def cmd_train(args) -> int:
    exp = P.Experiment.from_toml(args.config)
    if args.steps is not None:
        exp.train.steps = args.steps
    res = P.train(exp, out_dir=args.out)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"checkpoint": str(res.checkpoint), "steps": len(res.history), "final_total": last.get("total")}))
    return 0


def cmd_infer(args) -> int:
    model, header = _load_model(args.checkpoint)
    try:
        scene = load_scene(args.scene)
    except FileNotFoundError as e:
        raise _io(e)
    except ValueError as e:
        raise P.DataError(f"{args.scene}: {e}") from e
    res = P.infer_scene(model, scene, _infer_config(header), args.mode)
    P.write_predictions(args.out, scene.name, res.predictions)
    if args.dump_slices:
        from .fusion import fuse_tsdf

        P.dump_slices(fuse_tsdf(scene.views, scene.grid()).values, args.dump_slices, "tsdf")
        P.dump_slices(P.prediction_volume(scene.extents, res.predictions) > 0, args.dump_slices, "pred")
    print(json.dumps({"predictions": len(res.predictions), "out": str(args.out),
                      "seconds": round(res.timings["total"], 4)}))
    return 0


def cmd_evaluate(args) -> int:
    model, header = (None, {}) if args.predictor in ("oracle", "empty") else _load_model(args.checkpoint)
    scenes = P.load_scene_dir(args.scenes)
    report, records = P.evaluate(model, scenes, _infer_config(header), args.predictor)
    Path(args.report).write_text(P.report_json(report))
    if args.dump_slices:
        for rec in records:
            P.dump_slices(P.prediction_volume(rec.extents, rec.predictions) > 0, Path(args.dump_slices) / rec.scene_id,
                          "pred")
    for task in ("completion", "segmentation", "detection"):
        m = report[task]["map"]
        print(f"{task:<13} mAP@0.5 {'n/a' if m is None else f'{m:.4f}'}")
    return 0


def cmd_make_data(args) -> int:
    exp = P.Experiment.from_toml(args.config)
    paths = P.make_data(exp.scene, args.count, args.out, args.first_seed)
    if args.dump_slices:
        for p in paths:
            sc = load_scene(p)
            P.dump_slices(sc.labels > 0, Path(args.dump_slices) / p.stem, "labels")
    print(json.dumps({"scenes": len(paths), "out": str(args.out)}))
    return 0


def cmd_anchors(args) -> int:
    scenes = P.load_scene_dir(args.scenes)
    aset = P.compute_anchors(scenes, args.k, args.seed, args.split_m)
    Path(args.out).write_text(json.dumps(aset.to_dict(), indent=2))
    print(json.dumps({"small": len(aset.small), "big": len(aset.big), "out": str(args.out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="instcomp", description="Semantic instance completion on synthetic RGB-D scans.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override train.steps")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="predict instances for one scene archive")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("model", "copy_partial"), default="model")
    p.add_argument("--dump-slices", metavar="DIR", help="write PNG slices of the TSDF and predictions")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("evaluate", help="score a checkpoint on a directory of scenes")
    p.add_argument("--checkpoint")
    p.add_argument("--scenes", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--predictor", choices=P.PREDICTORS, default="model")
    p.add_argument("--dump-slices", metavar="DIR")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("make-data", help="generate and save synthetic scenes")
    p.add_argument("--config", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--first-seed", type=int)
    p.add_argument("--dump-slices", metavar="DIR")
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("anchors", help="cluster gt box sizes into anchors")
    p.add_argument("--scenes", required=True)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-m", type=float, help="size in meters above which an anchor is large")
    p.set_defaults(fn=cmd_anchors)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "evaluate" and args.predictor in ("model", "copy_partial") and not args.checkpoint:
            raise _UsageError("--checkpoint is required for the model and copy_partial predictors")
        return args.fn(args)
    except P.PipelineError as e:
        cat, msg = e.category, str(e)
    except ShapeError as e:
        cat, msg = "shape", str(e)
    except OSError as e:
        cat, msg = "io", str(_io(e))
    except (ValueError, KeyError, TypeError) as e:
        cat, msg = "error", f"{type(e).__name__}: {e}"
    msg = " ".join(msg.split())
    print(f"error[{cat}]: {msg}", file=sys.stderr)
    return EXIT_CODES.get(cat, 1)


if __name__ == "__main__":
    sys.exit(main())
