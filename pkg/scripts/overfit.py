"""Overfit a nano encoder on synthetic triplets and report retrieval and zero-shot Top1."""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from puncto.cli import dispatch
from puncto.encoder import load_encoder
from puncto.evaluation import ClassPromptSet, embed_shapes, rank_classes, topk_accuracy
from puncto.synthetic import make_triplet_dataset
from puncto.teachercache import load_caches, load_clouds, load_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--shapes", type=int, default=32)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    manifest_path = make_triplet_dataset(out / "data", num_shapes=args.shapes, num_points=512, dim=64, seed=args.seed)
    cfg = {"scale": "nano", "G": 64, "K": 32, "batch_size": 32, "total_steps": args.steps, "peak_lr": 1e-3,
           "mask_ratio": 0.5, "seed": args.seed, "manifest_path": str(manifest_path), "output_dir": str(out / "run")}
    (out / "config.json").write_text(json.dumps(cfg, indent=1))
    t0 = time.perf_counter()
    if dispatch(["train", "--config", str(out / "config.json")]) != 0:
        raise SystemExit(1)
    seconds = time.perf_counter() - t0

    enc, _ = load_encoder(out / "run" / "checkpoint.u3dc")
    manifest = load_manifest(manifest_path)
    _, texts = load_caches(manifest)
    clouds = load_clouds(manifest)
    ids = [s.id for s in manifest.shapes]
    embs = embed_shapes(enc, [clouds[i] for i in ids])
    prompts = ClassPromptSet(ids, list(texts.get_many([s.texts[0] for s in manifest.shapes])))
    ranks = rank_classes(embs, prompts)
    final = json.loads((out / "run" / "metrics.jsonl").read_text().splitlines()[-1])
    print(json.dumps({"final_loss": final["loss"], "tau": final["tau"], "seconds": round(seconds, 1),
                      "top1": topk_accuracy(ranks, np.arange(len(ids)), 1),
                      "top5": topk_accuracy(ranks, np.arange(len(ids)), 5)}))


if __name__ == "__main__":
    main()
