"""Whole-scene inference time against room footprint (median of repeats, height 32)."""
import argparse
import math
import time

import numpy as np

from instcomp import pipeline as P
from instcomp.network import Model, ModelConfig
from instcomp.scene_synth import SceneConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", help="trained model; an untrained tiny model otherwise")
    ap.add_argument("--sides", type=int, nargs="+", default=[64, 96, 128])
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    model = Model.load(args.checkpoint)[0] if args.checkpoint else Model(ModelConfig.tiny())
    prev = None
    for n in args.sides:
        scene = P.make_scenes(SceneConfig(seed=8, extents=(n, 32, n), n_objects=(n // 16, n // 12)), 1, 12)[0]
        P.infer_scene(model, scene)
        runs = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            res = P.infer_scene(model, scene)
            runs.append(time.perf_counter() - t0)
        t, voxels = float(np.median(runs)), n * n * 32
        line = f"{n}x32x{n}: {t:.3f}s " + " ".join(f"{k} {v:.3f}" for k, v in res.timings.items())
        if prev is not None:
            line += f"  growth per 2x voxels {(t / prev[0]) ** (math.log(2) / math.log(voxels / prev[1])):.2f}"
        print(line)
        prev = (t, voxels)


if __name__ == "__main__":
    main()
