"""``puncto`` command line: params, train, gradcheck, embed, classify, probe, partseg, paint, retrieve.

Every subcommand takes ``--config run.json``; flags override config fields.
Exit codes: 0 success, 2 usage/config errors, 1 runtime failures. Errors are
reported on stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import evaluation, partseg, retrieval
from .checkpoint import save_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .encoder import Encoder, count_params, load_2d_prior, load_encoder
from .paint import PaintAborted, PaintJob, paint
from .ply import read_ply, write_ply
from .synthetic import random_blob, random_unit
from .teachercache import (EmbeddingCache, TripletBatch, load_caches, load_clouds, load_manifest, parse_ref,
                           read_cache)
from .training import grad_check, init_train_state, set_determinism, train_loop

log = logging.getLogger("puncto")


def _emit(obj) -> None:
    print(json.dumps(obj), flush=True)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _encoder_from(cfg: RunConfig, path: str | None) -> Encoder:
    path = path or cfg.checkpoint
    if not path:
        raise ConfigError([("config.checkpoint", "a trained checkpoint is required")])
    encoder, _ = load_encoder(path)
    return encoder


def cmd_params(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    config = cfg.encoder_config()
    n = count_params(config)
    _emit({"scale": config.scale_name, "depth": config.depth, "width": config.width, "heads": config.heads,
           "params": n, "params_M": round(n / 1e6, 1), "seconds": round(time.perf_counter() - t0, 6)})
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    if not cfg.manifest_path:
        raise ConfigError([("config.manifest_path", "required for training")])
    enc_cfg = cfg.encoder_config()
    manifest = load_manifest(cfg.manifest_path)
    caches = load_caches(manifest)
    if caches[0].dim != enc_cfg.teacher_dim:
        raise ConfigError([("config.teacher_dim",
                            f"encoder projects to {enc_cfg.teacher_dim} but the teacher caches have dim {caches[0].dim}")])
    clouds = load_clouds(manifest)
    encoder = Encoder(enc_cfg, seed=cfg.init_seed)
    if cfg.init_checkpoint:
        load_2d_prior(cfg.init_checkpoint, encoder, cfg.freeze_transformer)
    elif cfg.freeze_transformer:
        encoder.freeze_transformer(True)
    state = init_train_state(encoder, cfg.schedule(), cfg.train_options())
    out = _out_dir(cfg)
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    train_loop(state, manifest, caches, clouds, cfg.batch_size, metrics_path=metrics_path)
    ckpt = out / "checkpoint.u3dc"
    encoder.save(ckpt, extra={"log_tau": state.log_tau.detach().reshape(1)})
    last = state.history[-1] if state.history else {}
    _emit({"command": "train", "steps": state.step, "final_loss": last.get("loss"), "tau": state.tau,
           "checkpoint": str(ckpt), "metrics": str(metrics_path)})
    return 0


def gradcheck_batch(cfg: RunConfig, size: int = 4, num_points: int = 512) -> TripletBatch:
    rng = np.random.default_rng(cfg.seed)
    dim = cfg.encoder_config().teacher_dim
    clouds = [random_blob(rng, num_points, f"gc{i}") for i in range(size)]
    return TripletBatch([c.id for c in clouds], clouds, random_unit(rng, size, dim), random_unit(rng, size, dim),
                        [f"img{i}" for i in range(size)], [f"txt{i}" for i in range(size)])


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    encoder = Encoder(cfg.encoder_config(), seed=cfg.init_seed)
    state = init_train_state(encoder, cfg.schedule(), cfg.train_options())
    batch = gradcheck_batch(cfg, args.batch)
    res = grad_check(state, batch, args.epsilon, args.samples, seed=cfg.seed)
    _emit({"command": "gradcheck", "max_rel_error": res.max_rel_error, "checked": res.num_checked,
           "roles": res.roles, "worst": {"tensor": res.worst[0], "index": res.worst[1],
                                          "analytic": res.worst[2], "numeric": res.worst[3]},
           "passed": res.max_rel_error < 1e-3, "seconds": round(time.perf_counter() - t0, 2)})
    return 0


def cmd_embed(cfg: RunConfig, args) -> int:
    if not cfg.manifest_path:
        raise ConfigError([("config.manifest_path", "required to build an index")])
    encoder = _encoder_from(cfg, args.checkpoint)
    manifest = load_manifest(cfg.manifest_path)
    index, report = retrieval.build_index(encoder, manifest, cfg.G, cfg.K)
    out = Path(args.out) if args.out else _out_dir(cfg) / "index"
    index.save(out, report)
    _emit({"command": "embed", "index": str(out), "indexed": report["indexed"], "skipped": len(report["skipped"])})
    return 0


def load_prompt_set(path: str) -> evaluation.ClassPromptSet:
    """JSON {"text_cache": path, "classes": {name: [text ids]}}; paths relative to the file."""
    with open(path) as fh:
        raw = json.load(fh)
    cache_path = raw["text_cache"]
    if not os.path.isabs(cache_path):
        cache_path = os.path.join(os.path.dirname(path), cache_path)
    cache = read_cache(cache_path)
    names = list(raw["classes"])
    return evaluation.ClassPromptSet(names, [cache.get_many(raw["classes"][n]) for n in names])


def cmd_classify(cfg: RunConfig, args) -> int:
    encoder = _encoder_from(cfg, args.checkpoint)
    prompts = load_prompt_set(args.prompts)
    clouds = [read_ply(p) for p in args.cloud]
    if cfg.manifest_path:
        clouds += list(load_clouds(load_manifest(cfg.manifest_path)).values())
    k = min(cfg.top_k, len(prompts.names))
    embs = evaluation.embed_shapes(encoder, clouds, cfg.G, cfg.K)
    out = _out_dir(cfg) / "classify.jsonl"
    with open(out, "w") as fh:
        for cloud, emb in zip(clouds, embs):
            top = evaluation.zero_shot_classify(emb, prompts, k)
            line = json.dumps({"id": cloud.id, "topk": [{"class": c, "score": s} for c, s in top]})
            fh.write(line + "\n")
            print(line)
    return 0


def cmd_probe(cfg: RunConfig, args) -> int:
    index = retrieval.ShapeIndex.load(args.index)
    with open(args.labels) as fh:
        labels_by_id = json.load(fh)
    keep = [i for i, sid in enumerate(index.ids) if sid in labels_by_id]
    embs = index.embeddings[keep].astype(np.float64)
    names = sorted({labels_by_id[index.ids[i]] for i in keep})
    labels = np.array([names.index(labels_by_id[index.ids[i]]) for i in keep])
    results = []
    for shots in cfg.shots:
        per_seed = []
        for seed in range(cfg.probe_seeds):
            model = evaluation.linear_probe_fit(embs, labels, shots, seed=seed)
            test = np.setdiff1d(np.arange(len(labels)), model.selected)
            if test.size == 0:
                test = model.selected
            per_seed.append(float((model.predict(embs[test]) == labels[test]).mean()))
        results.append({"shots": shots, "seeds": list(range(cfg.probe_seeds)),
                        "mean_acc": float(np.mean(per_seed)), "per_seed": per_seed})
    with open(_out_dir(cfg) / "probe.json", "w") as fh:
        json.dump(results, fh, indent=1)
    for r in results:
        _emit(r)
    return 0


def load_part_labels(path: str) -> partseg.PartLabelSet:
    """JSON {"text_cache": path, "categories": {cat: {part_name: text_id}}}."""
    with open(path) as fh:
        raw = json.load(fh)
    cache_path = raw["text_cache"]
    if not os.path.isabs(cache_path):
        cache_path = os.path.join(os.path.dirname(path), cache_path)
    cache = read_cache(cache_path)
    return partseg.PartLabelSet({cat: {name: cache[tid] for name, tid in parts.items()}
                                 for cat, parts in raw["categories"].items()})


def cmd_partseg(cfg: RunConfig, args) -> int:
    encoder = _encoder_from(cfg, args.checkpoint)
    labels = load_part_labels(args.parts)
    train = [partseg.read_labeled(p) for p in args.train]
    evals = [partseg.read_labeled(p) for p in args.eval]
    unseen = set(args.unseen)
    if any(s.category in unseen for s in train):
        raise ConfigError([("args.unseen", "unseen categories may not appear in the training clouds")])
    torch.manual_seed(cfg.seed)
    head = partseg.SegHead(encoder.config.width, encoder.config.teacher_dim, cfg.seg_hidden, seed=cfg.seed)
    trainer = partseg.PartSegTrainer(encoder, head, labels, cfg.seg_lr, cfg.G, cfg.K)
    before = partseg.tensor_digest(encoder)
    losses = [trainer.step(train) for _ in range(cfg.seg_steps)] if train else []
    if partseg.tensor_digest(encoder) != before:
        raise RuntimeError("backbone changed during part-segmentation training")
    out = _out_dir(cfg)
    preds = []
    for s in evals:
        p = trainer.predict(s)
        preds.append(p)
        partseg.write_prediction(out / f"{s.id}.seg.ply", s.cloud, p)
    metrics = partseg.miou_c(preds, [s.part_ids for s in evals], [s.category for s in evals], sorted(unseen))
    metrics.update({"steps": len(losses), "final_loss": losses[-1] if losses else None,
                    "backbone_sha256": before})
    save_checkpoint(out / "seg_head.u3dc", head.state_dict(), {"seg_hidden": cfg.seg_hidden})
    with open(out / "partseg_metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
    _emit({"command": "partseg", **{k: metrics[k] for k in ("mIoU_C", "mIoU_C_unseen", "mIoU_C_ALL")}})
    return 0


def cmd_paint(cfg: RunConfig, args) -> int:
    encoder = _encoder_from(cfg, args.checkpoint)
    cloud = read_ply(args.cloud)
    rid, cache_path = parse_ref(args.target_embedding)
    target = read_cache(cache_path)[rid].astype(np.float64)
    target /= np.linalg.norm(target)
    job = PaintJob(cloud, target, cfg.paint_steps, cfg.paint_step_size, cfg.G, cfg.K)
    try:
        painted, trace = paint(encoder, job)
    except PaintAborted as e:
        if args.trace:
            Path(args.trace).write_text(json.dumps({"trace": e.trace, "aborted": str(e)}))
        raise
    write_ply(args.out, painted)
    if args.trace:
        Path(args.trace).write_text(json.dumps({"trace": trace}))
    _emit({"command": "paint", "start": trace[0], "end": trace[-1], "steps": len(trace) - 1, "out": args.out})
    return 0


def cmd_retrieve(cfg: RunConfig, args) -> int:
    index = retrieval.ShapeIndex.load(args.index)
    caches: dict[str, EmbeddingCache] = {}
    queries = []
    for ref in args.query:
        rid, path = parse_ref(ref)
        if path not in caches:
            caches[path] = read_cache(path)
        queries.append(caches[path][rid])
    k = args.k if args.k is not None else cfg.top_k
    results = retrieval.retrieve(index, queries, k)
    _emit({"queries": args.query, "results": [{"id": i, "score": s} for i, s in results]})
    return 0


COMMANDS = {
    "params": cmd_params, "train": cmd_train, "gradcheck": cmd_gradcheck, "embed": cmd_embed,
    "classify": cmd_classify, "probe": cmd_probe, "partseg": cmd_partseg, "paint": cmd_paint,
    "retrieve": cmd_retrieve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="puncto", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--seed", type=int)
        return p

    p = add("params", "analytic parameter count of a scale")
    p.add_argument("--scale")
    p = add("train", "contrastive pretraining from a manifest")
    p.add_argument("--manifest", dest="manifest_path")
    p.add_argument("--scale")
    p.add_argument("--steps", dest="total_steps", type=int)
    p = add("gradcheck", "autograd vs central finite differences")
    p.add_argument("--scale", default=None)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--samples", type=int, default=240)
    p.add_argument("--batch", type=int, default=4)
    p = add("embed", "embed manifest clouds into a retrieval index")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", dest="manifest_path")
    p.add_argument("--out")
    p = add("classify", "zero-shot classification against prompt embeddings")
    p.add_argument("--checkpoint")
    p.add_argument("--prompts", required=True)
    p.add_argument("--cloud", action="append", default=[])
    p.add_argument("--manifest", dest="manifest_path")
    p.add_argument("-k", dest="top_k", type=int)
    p = add("probe", "few-shot linear probe on indexed embeddings")
    p.add_argument("--index", required=True)
    p.add_argument("--labels", required=True)
    p = add("partseg", "train a part-segmentation head and evaluate")
    p.add_argument("--checkpoint")
    p.add_argument("--parts", required=True)
    p.add_argument("--train", action="append", default=[])
    p.add_argument("--eval", action="append", default=[])
    p.add_argument("--unseen", action="append", default=[])
    p.add_argument("--steps", dest="seg_steps", type=int)
    p = add("paint", "optimize cloud colors toward a target embedding")
    p.add_argument("--checkpoint")
    p.add_argument("--cloud", required=True)
    p.add_argument("--target-embedding", required=True)
    p.add_argument("--steps", dest="paint_steps", type=int)
    p.add_argument("--step-size", dest="paint_step_size", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p = add("retrieve", "cosine retrieval from an index")
    p.add_argument("--index", required=True)
    p.add_argument("--query", action="append", required=True)
    p.add_argument("-k", type=int, default=None)
    return parser


CONFIG_FLAGS = ("output_dir", "seed", "scale", "manifest_path", "total_steps", "top_k", "seg_steps",
                "paint_steps", "paint_step_size")


def dispatch(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {k: getattr(args, k) for k in CONFIG_FLAGS if getattr(args, k, None) is not None}
        cfg = load_run_config(args.config, overrides)
        set_determinism(cfg.determinism)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(json.dumps(e.to_json()), file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure -> exit 1 with a JSON diagnostic
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": "runtime", "type": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=os.environ.get("PUNCTO_LOGLEVEL", "WARNING"))
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
