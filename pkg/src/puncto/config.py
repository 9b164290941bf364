"""Run configuration shared by every CLI subcommand.

Configs are flat JSON objects; unknown keys and ill-typed values are rejected
with field-path diagnostics before any compute starts.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Optional, Union, get_args, get_origin, get_type_hints

from .encoder import EncoderConfig, build_config
from .training import LOSS_MODES, Schedule, TrainOptions


class ConfigError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{p}: {m}" for p, m in problems))

    def to_json(self) -> dict:
        return {"error": "config", "fields": [{"path": p, "message": m} for p, m in self.problems]}


@dataclass
class RunConfig:
    # encoder
    scale: str = "nano"
    depth: Optional[int] = None
    width: Optional[int] = None
    heads: Optional[int] = None
    mlp_ratio: Optional[float] = None
    teacher_dim: Optional[int] = None
    drop_path_rate: float = 0.1
    pool: str = "cls"
    init_seed: int = 0
    # tokenizer
    G: int = 64
    K: int = 32
    # training
    batch_size: int = 32
    total_steps: int = 500
    warmup_steps: Optional[int] = None
    peak_lr: float = 1e-3
    mask_ratio: float = 0.5
    loss_mode: str = "both"
    tau_init: float = 0.07
    adam_betas: list = field(default_factory=lambda: [0.9, 0.98])
    adam_eps: float = 1e-6
    weight_decay: float = 0.0
    seed: int = 0
    determinism: bool = True
    manifest_path: Optional[str] = None
    init_checkpoint: Optional[str] = None
    freeze_transformer: bool = False
    # inference / downstream
    checkpoint: Optional[str] = None
    output_dir: str = "runs/default"
    top_k: int = 5
    shots: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    probe_seeds: int = 10
    seg_hidden: int = 256
    seg_steps: int = 200
    seg_lr: float = 1e-3
    paint_steps: int = 200
    paint_step_size: float = 0.01

    def encoder_config(self) -> EncoderConfig:
        overrides = {k: getattr(self, k) for k in ("depth", "width", "heads", "mlp_ratio", "teacher_dim")
                     if getattr(self, k) is not None}
        overrides["drop_path_rate"] = self.drop_path_rate
        overrides["pool"] = self.pool
        return build_config(self.scale, **overrides)

    def schedule(self) -> Schedule:
        return Schedule(self.peak_lr, self.total_steps, self.warmup_steps)

    def train_options(self) -> TrainOptions:
        return TrainOptions(num_groups=self.G, group_size=self.K, mask_ratio=self.mask_ratio,
                            loss_mode=self.loss_mode, seed=self.seed, tau_init=self.tau_init,
                            betas=tuple(self.adam_betas), eps=self.adam_eps, weight_decay=self.weight_decay)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Any, prefix: str = "config") -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError([(prefix, "expected a JSON object")])
        hints = get_type_hints(cls)
        problems = []
        values = {}
        for key, value in raw.items():
            path = f"{prefix}.{key}"
            if key not in hints:
                problems.append((path, "unknown key"))
                continue
            msg = _type_problem(hints[key], value)
            if msg:
                problems.append((path, msg))
            else:
                values[key] = float(value) if hints[key] in (float, Optional[float]) and value is not None else value
        if problems:
            raise ConfigError(problems)
        cfg = cls(**values)
        cfg.validate(prefix)
        return cfg

    def validate(self, prefix: str = "config") -> None:
        problems = []

        def check(cond, key, msg):
            if not cond:
                problems.append((f"{prefix}.{key}", msg))

        check(self.G >= 1, "G", "must be >= 1")
        check(self.K >= 1, "K", "must be >= 1")
        check(self.batch_size >= 1, "batch_size", "must be >= 1")
        check(self.total_steps >= 0, "total_steps", "must be >= 0")
        check(self.warmup_steps is None or 0 <= self.warmup_steps <= self.total_steps, "warmup_steps",
              "must lie in [0, total_steps]")
        check(self.peak_lr >= 0, "peak_lr", "must be >= 0")
        check(0.0 <= self.mask_ratio < 1.0, "mask_ratio", "must lie in [0, 1)")
        check(self.loss_mode in LOSS_MODES, "loss_mode", f"must be one of {list(LOSS_MODES)}")
        check(0.01 <= self.tau_init <= 100, "tau_init", "must lie in [0.01, 100]")
        check(len(self.adam_betas) == 2 and all(0 <= b < 1 for b in self.adam_betas), "adam_betas",
              "must be two numbers in [0, 1)")
        check(self.top_k >= 1, "top_k", "must be >= 1")
        check(all(isinstance(s, int) and s >= 1 for s in self.shots), "shots", "must be positive integers")
        check(self.probe_seeds >= 1, "probe_seeds", "must be >= 1")
        check(self.paint_step_size > 0, "paint_step_size", "must be > 0")
        if not problems:
            try:
                self.encoder_config()
            except (ValueError, TypeError) as e:
                problems.append((f"{prefix}.scale", str(e)))
        if problems:
            raise ConfigError(problems)


def _type_problem(hint, value) -> str | None:
    allowed = get_args(hint) if get_origin(hint) is Union else (hint,)
    for t in allowed:
        if t is type(None) and value is None:
            return None
        if t is bool and isinstance(value, bool):
            return None
        if t is int and isinstance(value, int) and not isinstance(value, bool):
            return None
        if t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return None
        if t is str and isinstance(value, str):
            return None
        if t is list and isinstance(value, list):
            return None
    names = " or ".join("null" if t is type(None) else t.__name__ for t in allowed)
    return f"expected {names}, got {type(value).__name__}"


def load_run_config(path: str | os.PathLike | None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError([("config", f"invalid JSON: {e}")]) from None
        except OSError as e:
            raise ConfigError([("config", f"cannot read {path}: {e.strerror}")]) from None
        if not isinstance(raw, dict):
            raise ConfigError([("config", "expected a JSON object")])
    raw = dict(raw)
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(raw)
