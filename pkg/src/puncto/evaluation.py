"""Zero-shot classification, few-shot linear probing and top-k accuracy."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .encoder import Encoder
from .geometry import PointCloud, normalize_unit_sphere
from .tokenizer import group_patches, stack_patches


def unit(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalize along ``axis``; zero vectors stay zero."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


@torch.no_grad()
def embed_shapes(encoder: Encoder, clouds: Sequence[PointCloud], num_groups: int = 64, group_size: int = 32,
                 batch_size: int = 32) -> np.ndarray:
    """Unit embeddings for many clouds: normalize, group from index 0, unmasked forward."""
    encoder.eval()
    dtype = encoder.cls_token.dtype
    out = []
    for lo in range(0, len(clouds), batch_size):
        patches = [group_patches(normalize_unit_sphere(c), num_groups, group_size, 0)
                   for c in clouds[lo:lo + batch_size]]
        emb = encoder(*stack_patches(patches, dtype=dtype)).embedding
        out.append(emb.double().numpy())
    if not out:
        return np.zeros((0, encoder.config.teacher_dim))
    return unit(np.concatenate(out))


def embed_shape(encoder: Encoder, cloud: PointCloud, num_groups: int = 64, group_size: int = 32) -> np.ndarray:
    return embed_shapes(encoder, [cloud], num_groups, group_size)[0]


@dataclass
class ClassPromptSet:
    """Per class, one or more prompt embeddings; aggregated by mean-then-normalize."""

    names: list[str]
    vectors: list[np.ndarray]

    def __post_init__(self):
        if not self.names:
            raise ValueError("prompt set needs at least one class")
        if len(self.names) != len(self.vectors):
            raise ValueError("one vector block per class name is required")
        self.vectors = [np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in self.vectors]
        for name, v in zip(self.names, self.vectors):
            if v.shape[0] < 1 or not np.all(np.isfinite(v)):
                raise ValueError(f"class {name!r} has no usable prompt vectors")

    def aggregated(self) -> np.ndarray:
        return unit(np.stack([v.mean(axis=0) for v in self.vectors]))


def class_scores(shape_embs: np.ndarray, prompts: ClassPromptSet) -> np.ndarray:
    return unit(np.atleast_2d(shape_embs)) @ prompts.aggregated().T


def rank_classes(shape_embs: np.ndarray, prompts: ClassPromptSet) -> np.ndarray:
    """Full class ranking per shape: descending cosine, ties by class index."""
    scores = class_scores(shape_embs, prompts)
    return np.argsort(-scores, axis=1, kind="stable")


def zero_shot_classify(shape_emb: np.ndarray, prompts: ClassPromptSet, k: int = 5) -> list[tuple[str, float]]:
    num = len(prompts.names)
    if not 1 <= k <= num:
        raise ValueError(f"k must be in [1, {num}], got {k}")
    scores = class_scores(shape_emb, prompts)[0]
    order = np.argsort(-scores, kind="stable")[:k]
    return [(prompts.names[i], float(scores[i])) for i in order]


def topk_accuracy(rankings: np.ndarray, true_labels: Sequence[int], k: int) -> float:
    rankings = np.atleast_2d(np.asarray(rankings))
    labels = np.asarray(true_labels)
    if rankings.shape[0] != labels.shape[0]:
        raise ValueError("rankings and labels must have the same length")
    if labels.size == 0:
        return 0.0
    hit = (rankings[:, :k] == labels[:, None]).any(axis=1)
    return float(hit.mean())


@dataclass
class ProbeModel:
    weights: np.ndarray  # (num_classes, dim)
    bias: np.ndarray
    classes: np.ndarray
    selected: np.ndarray
    iterations: int
    grad_norm: float

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.weights.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(x), axis=1)]


def select_shots(labels: np.ndarray, shots: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    picked = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < shots:
            raise ValueError(f"class {c} has {members.size} samples, fewer than {shots} shots")
        picked.append(np.sort(rng.choice(members, size=shots, replace=False)))
    return np.concatenate(picked)


def linear_probe_fit(embeddings: np.ndarray, labels: Sequence[int], shots_per_class: int, seed: int = 0,
                     l2: float = 1e-3, lr: float = 1.0, tol: float = 1e-5, max_iter: int = 10_000) -> ProbeModel:
    """Multinomial logistic regression on ``shots_per_class`` seeded picks per class.

    Full-batch gradient descent until the gradient norm drops below ``tol``.
    A small L2 penalty keeps the separable case from diverging.
    """
    x_all = np.asarray(embeddings, dtype=np.float64)
    y_all = np.asarray(labels)
    idx = select_shots(y_all, shots_per_class, seed)
    x, y = x_all[idx], y_all[idx]
    classes = np.unique(y_all)
    target = np.zeros((len(y), len(classes)))
    target[np.arange(len(y)), np.searchsorted(classes, y)] = 1.0
    w = np.zeros((len(classes), x.shape[1]))
    b = np.zeros(len(classes))
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        z = x @ w.T + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        diff = (p - target) / len(y)
        gw = diff.T @ x + l2 * w
        gb = diff.sum(axis=0)
        gnorm = float(np.sqrt((gw ** 2).sum() + (gb ** 2).sum()))
        if gnorm < tol:
            break
        w -= lr * gw
        b -= lr * gb
    return ProbeModel(w, b, classes, idx, it, gnorm)


def probe_eval(train_embs, train_labels, test_embs, test_labels, shots: int, seeds: Sequence[int]) -> dict:
    """Mean test accuracy of few-shot probes over several seeds."""
    per_seed = []
    for s in seeds:
        model = linear_probe_fit(train_embs, train_labels, shots, seed=s)
        per_seed.append(float((model.predict(test_embs) == np.asarray(test_labels)).mean()))
    return {"shots": shots, "seeds": list(seeds), "mean_acc": float(np.mean(per_seed)), "per_seed": per_seed}
