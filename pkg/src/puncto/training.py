"""Tri-modal contrastive alignment: loss, masked training step, schedule, grad check."""
from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import Encoder
from .geometry import PointCloud
from .teachercache import TripletBatch
from .tokenizer import group_patches, stack_patches

LOSS_MODES = ("both", "text_only", "image_only")
TAU_MIN, TAU_MAX = 1.0 / 100.0, 100.0


def unit_rows(x: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Row-normalize; zero rows stay zero."""
    norm = x.norm(dim=-1, keepdim=True)
    return x / torch.where(norm > eps, norm, torch.ones_like(norm))


def _info_nce(a: torch.Tensor, b: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    # mean over i of -log softmax_j(a_i . b_j / tau) at j = i
    logits = a @ b.T / tau
    return F.cross_entropy(logits, torch.arange(a.shape[0]), reduction="mean")


def contrastive_loss(eP, eI, eT, tau, loss_mode: str = "both", tol: float = 1e-4) -> torch.Tensor:
    """Symmetric point<->text and point<->image InfoNCE on unit-norm rows.

    ``both`` averages the four directional terms; ``text_only`` and
    ``image_only`` average the two terms involving that modality.
    """
    eP, eI, eT = (torch.as_tensor(x) for x in (eP, eI, eT))
    tau = torch.as_tensor(tau, dtype=eP.dtype)
    if loss_mode not in LOSS_MODES:
        raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {loss_mode!r}")
    if not bool(tau > 0):
        raise ValueError(f"temperature must be positive, got {float(tau)}")
    for name, e in (("eP", eP), ("eI", eI), ("eT", eT)):
        dev = (e.detach().norm(dim=-1) - 1.0).abs().max()
        if float(dev) > tol:
            raise ValueError(f"{name} rows are not unit norm (max deviation {float(dev):.3g})")
    terms = []
    if loss_mode in ("both", "text_only"):
        terms += [_info_nce(eP, eT, tau), _info_nce(eT, eP, tau)]
    if loss_mode in ("both", "image_only"):
        terms += [_info_nce(eP, eI, tau), _info_nce(eI, eP, tau)]
    return sum(terms) / len(terms)


@dataclass(frozen=True)
class Schedule:
    peak_lr: float = 1e-3
    total_steps: int = 1000
    warmup_steps: int | None = None  # default: 3% of total

    @property
    def warmup(self) -> int:
        if self.warmup_steps is None:
            return int(round(0.03 * self.total_steps))
        return self.warmup_steps


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup to the peak, then cosine decay to zero at ``total_steps``."""
    warm, total = schedule.warmup, schedule.total_steps
    if step < warm:
        return schedule.peak_lr * step / warm
    if total <= warm:
        return schedule.peak_lr
    progress = min(1.0, (step - warm) / (total - warm))
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainOptions:
    num_groups: int = 64
    group_size: int = 32
    mask_ratio: float = 0.5
    loss_mode: str = "both"
    seed: int = 0
    tau_init: float = 0.07
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if not TAU_MIN <= self.tau_init <= TAU_MAX:
            raise ValueError(f"tau_init must be in [{TAU_MIN}, {TAU_MAX}]")


@dataclass
class TrainState:
    encoder: Encoder
    log_tau: torch.nn.Parameter
    optimizer: torch.optim.Optimizer
    schedule: Schedule
    options: TrainOptions
    step: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def tau(self) -> float:
        return float(self.log_tau.detach().exp())

    def trainable(self) -> list[tuple[str, torch.nn.Parameter]]:
        named = [(n, p) for n, p in self.encoder.named_parameters() if p.requires_grad]
        return named + [("log_tau", self.log_tau)]

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy of every tensor in the state, including Adam moments."""
        out = {n: p.detach().cpu().numpy().copy() for n, p in self.encoder.named_parameters()}
        out["log_tau"] = self.log_tau.detach().cpu().numpy().copy()
        for n, p in self.trainable():
            st = self.optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in st:
                    out[f"adam.{key}.{n}"] = st[key].detach().cpu().numpy().copy()
        return out


def init_train_state(encoder: Encoder, schedule: Schedule, options: TrainOptions | None = None) -> TrainState:
    options = options or TrainOptions()
    log_tau = torch.nn.Parameter(torch.tensor(math.log(options.tau_init), dtype=encoder.cls_token.dtype))
    params = [p for p in encoder.parameters() if p.requires_grad] + [log_tau]
    opt = torch.optim.Adam(params, lr=0.0, betas=options.betas, eps=options.eps,
                           weight_decay=options.weight_decay, foreach=False)
    return TrainState(encoder, log_tau, opt, schedule, options)


def keep_count(num_groups: int, mask_ratio: float) -> int:
    return max(1, math.ceil((1.0 - mask_ratio) * num_groups - 1e-9))


def random_keep_mask(rng: np.random.Generator, num_groups: int, mask_ratio: float) -> np.ndarray:
    mask = np.zeros(num_groups, dtype=bool)
    mask[rng.permutation(num_groups)[: keep_count(num_groups, mask_ratio)]] = True
    return mask


def step_randomness(seed: int, step: int, batch_size: int, num_points: Sequence[int], num_groups: int,
                    mask_ratio: float):
    """FPS start indices, keep masks and the drop-path generator for one step."""
    rng = np.random.default_rng([seed, step, 0x5EED])
    starts = [int(rng.integers(n)) for n in num_points]
    masks = np.stack([random_keep_mask(rng, num_groups, mask_ratio) for _ in range(batch_size)])
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    return starts, masks, gen


def group_batch(clouds: Sequence[PointCloud], num_groups: int, group_size: int, starts: Sequence[int], dtype):
    patches = [group_patches(c, num_groups, group_size, s) for c, s in zip(clouds, starts)]
    return stack_patches(patches, dtype=dtype)


def batch_loss(state: TrainState, grouped, keep_mask, images, texts, generator=None):
    enc = state.encoder
    coords, colors, centers = grouped
    mask = None if keep_mask is None else torch.as_tensor(keep_mask)
    out = enc(coords, colors, centers, keep_mask=mask, generator=generator)
    dtype = out.embedding.dtype
    eP = unit_rows(out.embedding)
    eI = unit_rows(torch.as_tensor(np.asarray(images), dtype=dtype))
    eT = unit_rows(torch.as_tensor(np.asarray(texts), dtype=dtype))
    loss = contrastive_loss(eP, eI, eT, state.log_tau.exp(), state.options.loss_mode)
    return loss, out.num_tokens


def train_step(state: TrainState, batch: TripletBatch) -> dict:
    """One masked, stochastic-depth Adam step on a triplet batch.

    Nothing in ``state`` changes if the loss or any gradient is non-finite.
    """
    opts = state.options
    enc = state.encoder
    dtype = enc.cls_token.dtype
    starts, masks, gen = step_randomness(
        opts.seed, state.step, len(batch), [len(c) for c in batch.clouds], opts.num_groups, opts.mask_ratio
    )
    grouped = group_batch(batch.clouds, opts.num_groups, opts.group_size, starts, dtype)
    enc.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss, tokens = batch_loss(state, grouped, masks, batch.images, batch.texts, gen)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {state.step}: {float(loss)}")
    loss.backward()
    trainable = state.trainable()
    sq = 0.0
    for n, p in trainable:
        if p.grad is None:
            continue
        if not torch.isfinite(p.grad).all():
            state.optimizer.zero_grad(set_to_none=True)
            raise FloatingPointError(f"non-finite gradient for {n!r} at step {state.step}")
        sq += float((p.grad.double() ** 2).sum())
    lr = lr_at(state.step, state.schedule)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    with torch.no_grad():
        state.log_tau.clamp_(math.log(TAU_MIN), math.log(TAU_MAX))
    metrics = {"step": state.step, "loss": float(loss.detach()), "lr": lr, "tau": state.tau,
               "grad_norm": math.sqrt(sq), "tokens": tokens}
    state.step += 1
    state.history.append(metrics)
    return metrics


ROLES = {
    "tokenizer": lambda n: n.startswith("tokenizer."),
    "pos": lambda n: n.startswith("pos."),
    "cls_token": lambda n: n == "cls_token",
    "qkv": lambda n: ".attn.qkv." in n,
    "attn_proj": lambda n: ".attn.proj." in n,
    "mlp": lambda n: ".mlp." in n,
    "norm": lambda n: "norm" in n,
    "proj": lambda n: n == "proj.weight",
    "log_tau": lambda n: n == "log_tau",
}


def role_of(name: str) -> str:
    for role, match in ROLES.items():
        if match(name):
            return role
    return "other"


@dataclass
class GradCheckResult:
    max_rel_error: float
    num_checked: int
    roles: dict[str, int]
    worst: tuple[str, int, float, float]


def grad_check(state: TrainState, batch: TripletBatch, epsilon: float = 1e-6, num_samples: int = 240,
               seed: int = 0) -> GradCheckResult:
    """Compare autograd gradients with central finite differences in float64.

    The forward is made deterministic by fixing grouping and keep masks and
    disabling stochastic depth. Samples at least one scalar from every
    trainable tensor, so every parameter role (and ``log_tau``) is covered.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    opts = state.options
    enc = copy.deepcopy(state.encoder).double().eval()
    log_tau = torch.nn.Parameter(state.log_tau.detach().double().clone())
    check = TrainState(enc, log_tau, state.optimizer, state.schedule, opts, state.step)
    starts, masks, _ = step_randomness(
        opts.seed, state.step, len(batch), [len(c) for c in batch.clouds], opts.num_groups, opts.mask_ratio
    )
    grouped = group_batch(batch.clouds, opts.num_groups, opts.group_size, starts, torch.float64)

    def loss_fn():
        return batch_loss(check, grouped, masks, batch.images, batch.texts)[0]

    named = check.trainable()
    for _, p in named:
        p.grad = None
    loss_fn().backward()

    rng = np.random.default_rng(seed)
    picks = [(i, int(rng.integers(p.numel()))) for i, (_, p) in enumerate(named)]
    sizes = np.array([p.numel() for _, p in named], dtype=float)
    while len(picks) < num_samples:
        i = int(rng.choice(len(named), p=sizes / sizes.sum()))
        picks.append((i, int(rng.integers(named[i][1].numel()))))

    worst = ("", -1, 0.0, 0.0)
    max_err = 0.0
    roles: dict[str, int] = {}
    with torch.no_grad():
        for i, j in picks:
            name, p = named[i]
            flat = p.view(-1)
            analytic = float(p.grad.view(-1)[j]) if p.grad is not None else 0.0
            orig = float(flat[j])
            flat[j] = orig + epsilon
            up = float(loss_fn())
            flat[j] = orig - epsilon
            down = float(loss_fn())
            flat[j] = orig
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            roles[role_of(name)] = roles.get(role_of(name), 0) + 1
            if err >= max_err:
                max_err = err
                worst = (name, j, analytic, numeric)
    return GradCheckResult(max_err, len(picks), roles, worst)


def set_determinism(enabled: bool, threads: int | None = None) -> None:
    if threads is None:
        env = os.environ.get("PUNCTO_THREADS")
        threads = int(env) if env else None
    if threads:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(enabled)


METRIC_KEYS = ("step", "loss", "lr", "tau", "grad_norm")


def append_metrics(path: str | os.PathLike, metrics: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps({k: metrics[k] for k in METRIC_KEYS}) + "\n")


def train_loop(state: TrainState, manifest, caches, clouds, batch_size: int, steps: int | None = None,
               metrics_path: str | os.PathLike | None = None, log=None) -> TrainState:
    """Run ``steps`` (default: up to ``total_steps``) training steps."""
    from .teachercache import sample_batch

    end = state.schedule.total_steps if steps is None else state.step + steps
    while state.step < end:
        batch = sample_batch(manifest, caches, batch_size, state.options.seed, state.step, clouds)
        metrics = train_step(state, batch)
        if metrics_path is not None:
            append_metrics(metrics_path, metrics)
        if log is not None:
            log(metrics)
    return state
