"""Train on many scenes and score held-out scenes against the copy-partial baseline."""
import argparse
import json
from pathlib import Path

from instcomp import pipeline as P

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "generalization.toml"))
    ap.add_argument("--out", default="runs/generalization")
    ap.add_argument("--checkpoint", help="skip training and score this checkpoint")
    ap.add_argument("--held-out", type=int, default=32)
    args = ap.parse_args()

    exp = P.Experiment.from_toml(args.config)
    if args.checkpoint:
        from instcomp.network import Model

        model, _ = Model.load(args.checkpoint)
    else:
        model = P.train(exp, out_dir=args.out, log_every=10).model
    held = P.make_scenes(exp.scene, args.held_out, exp.scene.n_views, first_seed=exp.scene.seed + 10_000)
    for predictor in ("model", "copy_partial"):
        report, _ = P.evaluate(model, held, exp.infer, predictor)
        print(predictor, json.dumps({t: round(report[t]["map"], 4) for t in ("completion", "segmentation", "detection")}))


if __name__ == "__main__":
    main()
