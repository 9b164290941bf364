"""End-to-end acceptance criteria, one test per criterion (run in order)."""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from puncto.checkpoint import load_checkpoint, save_checkpoint
from puncto.cli import dispatch
from puncto.encoder import Encoder, build_config, count_params, load_encoder
from puncto.evaluation import ClassPromptSet, embed_shapes, rank_classes, topk_accuracy, unit, zero_shot_classify
from puncto.geometry import farthest_point_sample, knn
from puncto.paint import PaintJob, paint
from puncto.partseg import (PartLabelSet, PartSegTrainer, SegHead, feature_propagate, propagation_weights,
                            read_labeled, tensor_digest)
from puncto.ply import read_ply
from puncto.retrieval import ShapeIndex, retrieve
from puncto.synthetic import make_partseg_dataset, make_triplet_dataset, random_blob, random_unit
from puncto.teachercache import (EmbeddingCache, TripletBatch, load_caches, load_clouds, load_manifest,
                                 read_cache, write_cache)
from puncto.training import (ROLES, Schedule, TrainOptions, contrastive_loss, grad_check, init_train_state,
                             train_loop, train_step)

FIXTURES = Path(__file__).parent / "fixtures"
LADDER = {"Ti": 6.2e6, "S": 22.6e6, "B": 88.4e6, "L": 306.7e6, "g": 1016.5e6}


def brute_fps(points, count, start):
    pts = [tuple(map(float, p)) for p in points]
    chosen = [start]
    while len(chosen) < count:
        best, best_d = None, -1.0
        for i, p in enumerate(pts):
            if i in chosen:
                continue
            d = min(sum((a - b) ** 2 for a, b in zip(p, pts[j])) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def brute_knn(points, queries, k):
    out = []
    for q in queries:
        d = sorted((sum((float(a) - float(b)) ** 2 for a, b in zip(p, q)), i) for i, p in enumerate(points))
        out.append([i for _, i in d[:k]])
    return out


def test_01_scaling_ladder():
    t0 = time.perf_counter()
    counts = {name: count_params(build_config(name)) for name in LADDER}
    elapsed = time.perf_counter() - t0
    for name, target in LADDER.items():
        assert abs(counts[name] - target) / target <= 0.05, (name, counts[name])
    assert elapsed < 1.0


def test_02_loss_closed_forms():
    rng = np.random.default_rng(0)
    v = torch.tensor(random_unit(rng, 3, 16), dtype=torch.float64)
    assert float(contrastive_loss(v[:1], v[1:2], v[2:3], torch.tensor(0.07, dtype=torch.float64))) == 0.0
    e = torch.eye(4, dtype=torch.float64)[:2]
    loss = float(contrastive_loss(e, e, e, torch.tensor(1.0, dtype=torch.float64)))
    assert abs(loss - math.log1p(math.exp(-1.0))) < 1e-6
    assert abs(loss - 0.313262) < 1e-6


def test_03_gradient_fidelity():
    t0 = time.perf_counter()
    enc = Encoder(build_config("nano"), seed=0)
    assert (enc.config.depth, enc.config.width) == (2, 32)
    state = init_train_state(enc, Schedule(1e-3, 10), TrainOptions(num_groups=16, group_size=16, seed=0))
    rng = np.random.default_rng(1)
    clouds = [random_blob(rng, 256, f"g{i}") for i in range(4)]
    batch = TripletBatch([c.id for c in clouds], clouds, random_unit(rng, 4, 64), random_unit(rng, 4, 64),
                         [f"i{i}" for i in range(4)], [f"t{i}" for i in range(4)])
    res = grad_check(state, batch, epsilon=1e-6, num_samples=240, seed=0)
    elapsed = time.perf_counter() - t0
    assert res.num_checked >= 200
    assert set(res.roles) == set(ROLES), res.roles
    assert res.max_rel_error < 1e-3, res.worst
    assert elapsed < 120


def test_04_overfit_sanity(overfit_run):
    assert overfit_run["seconds"] < 600
    lines = (overfit_run["dir"] / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 500
    assert json.loads(lines[-1])["loss"] < 0.1

    enc, _ = load_encoder(overfit_run["dir"] / "checkpoint.u3dc")
    manifest = load_manifest(overfit_run["manifest"])
    _, texts = load_caches(manifest)
    clouds = load_clouds(manifest)
    ids = [s.id for s in manifest.shapes]
    embs = embed_shapes(enc, [clouds[i] for i in ids], 64, 32)
    text_vecs = texts.get_many([s.texts[0] for s in manifest.shapes])

    index = ShapeIndex(ids, unit(text_vecs).astype(np.float32), {})
    retrieved = [retrieve(index, [e], 1)[0][0] for e in embs]
    assert retrieved == ids

    prompts = ClassPromptSet(ids, list(text_vecs))
    assert topk_accuracy(rank_classes(embs, prompts), np.arange(len(ids)), 1) == 1.0
    assert [zero_shot_classify(e, prompts, 1)[0][0] for e in embs] == ids


def test_05_geometry_oracles():
    rng = np.random.default_rng(5)
    for trial in range(100):
        n = int(rng.integers(1, 65))
        if trial % 4 == 0:
            pts = rng.integers(0, 3, size=(n, 3)).astype(float)  # duplicates and exact ties
        else:
            pts = rng.standard_normal((n, 3))
        count = int(rng.integers(1, n + 1))
        start = int(rng.integers(n))
        assert farthest_point_sample(pts, count, start).tolist() == brute_fps(pts, count, start)
        queries = np.concatenate([pts[: int(rng.integers(1, n + 1))], rng.standard_normal((3, 3))])
        k = int(rng.integers(1, n + 1))
        assert knn(pts, queries, k).tolist() == brute_knn(pts, queries, k)


def test_06_masking_contract():
    for groups in (16, 15):
        enc = Encoder(build_config("nano"), seed=0)
        state = init_train_state(enc, Schedule(1e-3, 4), TrainOptions(num_groups=groups, group_size=8,
                                                                        mask_ratio=0.5))
        seen = []
        enc.blocks[0].register_forward_pre_hook(lambda m, args: seen.append(args[0].shape[1]))
        rng = np.random.default_rng(0)
        clouds = [random_blob(rng, 128, f"m{i}") for i in range(3)]
        batch = TripletBatch([c.id for c in clouds], clouds, random_unit(rng, 3, 64), random_unit(rng, 3, 64),
                             ["a", "b", "c"], ["d", "e", "f"])
        for _ in range(2):
            metrics = train_step(state, batch)
            assert metrics["tokens"] == math.ceil(groups / 2) + 1
        assert seen == [math.ceil(groups / 2) + 1] * 2
        seen.clear()
        embed_shapes(enc, clouds, groups, 8)
        assert seen == [groups + 1]


def test_07_freeze_contracts(tmp_path):
    manifest = make_triplet_dataset(tmp_path / "data", num_shapes=8, num_points=256, dim=64, seed=3)
    manifest = load_manifest(manifest)
    caches = load_caches(manifest)
    clouds = load_clouds(manifest)
    enc = Encoder(build_config("nano"), seed=0)
    enc.freeze_transformer(True)
    assert all(enc.frozen_flags)
    before = {n: p.detach().clone() for n, p in enc.named_parameters()}
    state = init_train_state(enc, Schedule(1e-3, 100), TrainOptions(num_groups=16, group_size=16))
    train_loop(state, manifest, caches, clouds, batch_size=8)
    assert state.step == 100
    after = dict(enc.named_parameters())
    for n in enc.transformer_names():
        assert torch.equal(before[n], after[n].detach()), n
    for n in ("tokenizer.stage1.0.weight", "pos.mlp.0.weight", "proj.weight"):
        assert not torch.equal(before[n], after[n].detach()), n

    data = make_partseg_dataset(tmp_path / "seg", num_train=1, num_eval=0, num_unseen=0, num_points=256)
    layout = json.loads(Path(data["parts"]).read_text())
    text = read_cache(Path(data["parts"]).parent / layout["text_cache"])
    labels = PartLabelSet({c: {p: text[t] for p, t in ps.items()} for c, ps in layout["categories"].items()})
    enc.freeze_transformer(False)
    digest = tensor_digest(enc)
    trainer = PartSegTrainer(enc, SegHead(32, 64, 32, seed=0), labels, 1e-2, 16, 16)
    head_before = tensor_digest(trainer.head)
    sample = read_labeled(data["train"][0])
    for _ in range(20):
        trainer.step([sample])
    assert tensor_digest(enc) == digest
    assert tensor_digest(trainer.head) != head_before


def test_08_feature_propagation():
    rng = np.random.default_rng(8)
    src = rng.standard_normal((20, 3))
    tgt = np.concatenate([rng.standard_normal((50, 3)), src[5:6]])
    idx, w = propagation_weights(src, tgt, 3)
    assert np.all(w >= 0)
    assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-6
    feats = rng.standard_normal((20, 7))
    out = feature_propagate(src, feats, tgt, 3)
    assert np.array_equal(out[-1], feats[5])

    src1 = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    out1 = feature_propagate(src1, np.array([[0.0], [1.0]]), np.array([[0.25, 0, 0]]), k=2)
    assert abs(float(out1[0, 0]) - 0.25) < 1e-6


def _partseg_run(root: Path, data: dict, ckpt: Path, name: str) -> Path:
    out = root / name
    argv = ["partseg", "--checkpoint", str(ckpt), "--parts", data["parts"], "--train", data["train"][0],
            "--steps", "200", "--unseen", "box", "--seed", "0", "--output-dir", str(out)]
    for p in data["eval"] + data["unseen"]:
        argv += ["--eval", p]
    assert dispatch(argv) == 0
    return out


@pytest.fixture(scope="module")
def partseg_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("partseg")
    data = make_partseg_dataset(root / "data", num_train=1, num_eval=8, num_unseen=4, num_points=1024, seed=0)
    ckpt = root / "backbone.u3dc"
    Encoder(build_config("nano", drop_path_rate=0.0), seed=0).save(ckpt)
    return root, data, ckpt


def test_09_partseg_synthetic(partseg_setup):
    root, data, ckpt = partseg_setup
    out = _partseg_run(root, data, ckpt, "run_a")
    metrics = json.loads((out / "partseg_metrics.json").read_text())
    assert metrics["steps"] == 200
    assert metrics["mIoU_C"] >= 0.9, metrics
    assert metrics["mIoU_C_unseen"] is not None and 0.0 <= metrics["mIoU_C_unseen"] <= 1.0
    assert set(metrics["per_category"]) == {"sphere", "box"}
    for p in data["eval"] + data["unseen"]:
        assert (out / (Path(p).stem + ".seg.ply")).exists()


def test_10_painting(overfit_run):
    enc, _ = load_encoder(overfit_run["dir"] / "checkpoint.u3dc")
    manifest = load_manifest(overfit_run["manifest"])
    _, texts = load_caches(manifest)
    cloud = read_ply(manifest.resolve(manifest.shapes[0].cloud), id=manifest.shapes[0].id)
    target = unit(texts[manifest.shapes[7].texts[0]])
    in_range = []
    job = PaintJob(cloud, target, steps=100, step_size=0.1, num_groups=64, group_size=32,
                   on_step=lambda i, c: in_range.append(bool(c.min() >= 0.0 and c.max() <= 1.0)))
    painted, trace = paint(enc, job)
    assert len(trace) == 101 and len(in_range) == 100 and all(in_range)
    diffs = np.diff(trace)
    assert np.mean(diffs >= 0) >= 0.9
    assert trace[-1] - trace[0] >= 0.2, (trace[0], trace[-1])
    assert painted.positions.tobytes() == cloud.positions.tobytes()


def test_11_determinism(overfit_run, overfit_rerun, partseg_setup):
    for name in ("metrics.jsonl", "checkpoint.u3dc"):
        assert (overfit_run["dir"] / name).read_bytes() == (overfit_rerun["dir"] / name).read_bytes(), name
    root, data, ckpt = partseg_setup
    a = _partseg_run(root, data, ckpt, "det_a")
    b = _partseg_run(root, data, ckpt, "det_b")
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    assert "seg_head.u3dc" in files and "partseg_metrics.json" in files
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_12_format_round_trips(tmp_path):
    enc = Encoder(build_config("nano"), seed=4)
    enc.save(tmp_path / "a.u3dc", extra={"log_tau": torch.tensor([math.log(0.07)])})
    tensors, meta = load_checkpoint(tmp_path / "a.u3dc")
    save_checkpoint(tmp_path / "b.u3dc", tensors, meta)
    tensors_b, meta_b = load_checkpoint(tmp_path / "b.u3dc")
    save_checkpoint(tmp_path / "c.u3dc", tensors_b, meta_b)
    assert (tmp_path / "b.u3dc").read_bytes() == (tmp_path / "c.u3dc").read_bytes()
    assert (tmp_path / "a.u3dc").read_bytes() == (tmp_path / "b.u3dc").read_bytes()

    rng = np.random.default_rng(12)
    cache = EmbeddingCache.from_mapping({f"obj/{i}": v for i, v in enumerate(random_unit(rng, 9, 24))}, "t")
    write_cache(tmp_path / "a.u3de", cache)
    write_cache(tmp_path / "b.u3de", read_cache(tmp_path / "a.u3de"))
    write_cache(tmp_path / "c.u3de", read_cache(tmp_path / "b.u3de"))
    assert (tmp_path / "b.u3de").read_bytes() == (tmp_path / "c.u3de").read_bytes()

    expected_pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.5]], dtype=float)
    expected_rgb = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255], [51, 102, 153]]) / 255.0
    for name in ("tetra_ascii.ply", "tetra_binary.ply"):
        cloud = read_ply(FIXTURES / name)
        np.testing.assert_array_equal(cloud.positions, expected_pos)
        np.testing.assert_allclose(cloud.colors, expected_rgb, atol=1e-12)
