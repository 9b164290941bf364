"""One-shot part segmentation on two-part spheres, with boxes as an unseen category."""
import argparse
import json
from pathlib import Path

from puncto.cli import dispatch
from puncto.encoder import Encoder, build_config
from puncto.synthetic import make_partseg_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/partseg")
    ap.add_argument("--checkpoint", help="backbone; a fresh nano encoder when omitted")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    data = make_partseg_dataset(out / "data", num_train=1, num_eval=8, num_unseen=4, seed=args.seed)
    ckpt = args.checkpoint
    if ckpt is None:
        ckpt = str(out / "backbone.u3dc")
        Encoder(build_config("nano", drop_path_rate=0.0), seed=args.seed).save(ckpt)
    argv = ["partseg", "--checkpoint", ckpt, "--parts", data["parts"], "--train", data["train"][0],
            "--unseen", "box", "--steps", str(args.steps), "--seed", str(args.seed),
            "--output-dir", str(out / "run")]
    for p in data["eval"] + data["unseen"]:
        argv += ["--eval", p]
    if dispatch(argv) != 0:
        raise SystemExit(1)
    print(json.dumps(json.loads((out / "run" / "partseg_metrics.json").read_text())["per_category"]))


if __name__ == "__main__":
    main()
