"""Point cloud painting: gradient ascent on RGB toward a target embedding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .encoder import Encoder
from .geometry import PointCloud, normalize_unit_sphere
from .tokenizer import group_patches


@dataclass
class PaintJob:
    cloud: PointCloud
    target: np.ndarray
    steps: int = 200
    step_size: float = 0.01
    num_groups: int = 64
    group_size: int = 32
    trace: list[float] = field(default_factory=list)
    # called as on_step(step, colors) after every update
    on_step: Optional[Callable[[int, np.ndarray], None]] = None


class PaintAborted(FloatingPointError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


def paint(encoder: Encoder, job: PaintJob) -> tuple[PointCloud, list[float]]:
    """Maximize cos(f(cloud), target) over colors only.

    Grouping is computed once from the (fixed) positions. ``trace[0]`` is the
    starting similarity and ``trace[i]`` the similarity after step ``i``.
    Colors are clamped to [0, 1] after every step.
    """
    target = np.asarray(job.target, dtype=np.float64)
    if abs(np.linalg.norm(target) - 1.0) > 1e-4:
        raise ValueError("paint target must be a unit vector")
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    dtype = encoder.cls_token.dtype
    geom = normalize_unit_sphere(job.cloud)
    patches = group_patches(geom, job.num_groups, job.group_size, 0)
    members = torch.as_tensor(patches.member_indices)
    coords = torch.as_tensor(patches.local_coords, dtype=dtype)[None]
    centers = torch.as_tensor(patches.centers, dtype=dtype)[None]
    tgt = torch.as_tensor(target, dtype=dtype)
    colors = torch.as_tensor(job.cloud.colors, dtype=dtype).clone().requires_grad_(True)

    def similarity():
        emb = encoder(coords, colors[members][None], centers).embedding[0]
        return torch.dot(emb, tgt) / emb.norm().clamp_min(1e-12)

    trace = job.trace
    trace.clear()
    for i in range(job.steps):
        sim = similarity()
        if i == 0:
            trace.append(float(sim.detach()))
        (grad,) = torch.autograd.grad(sim, colors)
        if not torch.isfinite(grad).all():
            raise PaintAborted(f"non-finite color gradient at step {i}", list(trace))
        with torch.no_grad():
            colors += job.step_size * grad
            colors.clamp_(0.0, 1.0)
        with torch.no_grad():
            trace.append(float(similarity()))
        if job.on_step is not None:
            job.on_step(i + 1, colors.detach().double().numpy().copy())
    if job.steps == 0:
        with torch.no_grad():
            trace.append(float(similarity()))
    painted = job.cloud.with_colors(colors.detach().double().numpy())
    return painted, list(trace)
