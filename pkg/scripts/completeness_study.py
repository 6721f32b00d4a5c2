"""Completion mAP per completeness bin for smoke models trained under several seeds."""
import argparse
from pathlib import Path

from instcomp import pipeline as P

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "smoke.toml"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/completeness")
    args = ap.parse_args()

    exp = P.Experiment.from_toml(args.config)
    source = P.SceneSource.synthetic(exp.scene, exp.train.n_scenes, exp.train.views_per_scene)
    scenes = [e.scene for e in source.entries]
    monotone = 0
    for seed in args.seeds:
        exp.train.seed = seed
        res = P.train(exp, source, out_dir=Path(args.out) / f"seed{seed}", log_every=10)
        bins = P.evaluate(res.model, scenes, exp.infer)[0]["completeness_bins"]
        maps = [b["map"] for b in bins if b["map"] is not None]
        ok = all(x <= y for x, y in zip(maps, maps[1:]))
        monotone += ok
        print(f"seed {seed}: " + "  ".join(
            f"[{b['lo']:.2f},{b['hi']:.2f}) n={b['n_gt']} mAP={'-' if b['map'] is None else round(b['map'], 3)}"
            for b in bins) + f"  non-decreasing={ok}")
    print(f"non-decreasing in {monotone}/{len(args.seeds)} runs")


if __name__ == "__main__":
    main()
