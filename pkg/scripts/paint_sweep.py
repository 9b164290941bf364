"""Paint shape i toward the text embedding of shape (i + offset) for a trained checkpoint."""
import argparse
import json

import numpy as np

from puncto.encoder import load_encoder
from puncto.evaluation import unit
from puncto.paint import PaintJob, paint
from puncto.ply import read_ply
from puncto.teachercache import load_caches, load_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("manifest")
    ap.add_argument("--shapes", type=int, default=6)
    ap.add_argument("--offset", type=int, default=7)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--step-sizes", type=float, nargs="+", default=[0.01, 0.1])
    args = ap.parse_args()

    enc, _ = load_encoder(args.checkpoint)
    manifest = load_manifest(args.manifest)
    _, texts = load_caches(manifest)
    n = len(manifest.shapes)
    for lr in args.step_sizes:
        for i in range(min(args.shapes, n)):
            src = manifest.shapes[i]
            dst = manifest.shapes[(i + args.offset) % n]
            cloud = read_ply(manifest.resolve(src.cloud))
            _, trace = paint(enc, PaintJob(cloud, unit(texts[dst.texts[0]]), steps=args.steps, step_size=lr))
            up = float(np.mean(np.diff(trace) >= 0))
            print(json.dumps({"step_size": lr, "source": src.id, "target": dst.id, "start": trace[0],
                              "gain": trace[-1] - trace[0], "non_decreasing": up}))


if __name__ == "__main__":
    main()
