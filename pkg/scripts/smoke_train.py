"""Train the smoke preset and compare it with the copy-partial baseline on its own scenes."""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from instcomp import pipeline as P

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "smoke.toml"))
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()

    exp = P.Experiment.from_toml(args.config)
    if args.steps is not None:
        exp.train.steps = args.steps
    if args.seed is not None:
        exp.train.seed = args.seed
    source = P.SceneSource.synthetic(exp.scene, exp.train.n_scenes, exp.train.views_per_scene)
    t0 = time.perf_counter()
    res = P.train(exp, source, out_dir=args.out, log_every=10)
    seconds = time.perf_counter() - t0
    totals = np.array([h["total"] for h in res.history])
    print(f"trained {len(totals)} steps in {seconds / 60:.1f} min; loss {totals[0]:.3f} -> {totals[-100:].mean():.4f}")

    scenes = [e.scene for e in source.entries]
    for predictor in ("model", "copy_partial"):
        report, _ = P.evaluate(res.model, scenes, exp.infer, predictor)
        print(predictor, json.dumps({t: round(report[t]["map"], 4) for t in ("completion", "segmentation", "detection")}))
        Path(args.out, f"metrics_{predictor}.json").write_text(P.report_json(report))


if __name__ == "__main__":
    main()
