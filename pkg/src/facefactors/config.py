"""Run configuration: stage hyperparameters, config file loading, and
key=value overrides. Defaults live in the versioned JSON files under
configs/, not here; this module only defines the schema.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .nets import NetConfig
from .synthworld import DynamicsSpec, WorldConfig

STAGES = ("probe", "1", "2-lip", "2-eye", "2-pose", "3")


@dataclass
class StageConfig:
    stage: str = "1"
    steps: int = 1500
    batch_size: int = 12
    seed: int = 0
    deterministic: bool = True
    # learning rates by role; decayed x decay_rate every decay_every steps
    lr_enc: float = 1e-4
    lr_gen: float = 2e-4
    lr_disc: float = 3.5e-5
    lr_head: float = 2e-4
    decay_rate: float = 0.5
    decay_every: int = 0          # 0 -> a third of total steps
    # stage-2 contrastive settings
    k_negatives: int = 8
    min_offset: int = 5
    n_eye_triplets: int = 1536
    # stage-3 settings
    k_win: int = 13
    bank_capacity: int = 512
    exp_freeze_frac: float = 0.4
    canonical_dropout: float = 0.15
    all_canonical_prob: float = 0.05
    aug_variants: int = 2
    # loss weights
    w_recon: float = 1.0
    w_adv: float = 0.1
    w_mot: float = 10.0
    w_fm: float = 1.0
    w_con: float = 10.0
    w_decor: float = 1.0
    # probe pretraining
    probe_pool: int = 4000

    def validate(self) -> None:
        self.stage = str(self.stage)
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.k_win < 1 or self.k_win % 2 == 0:
            raise ConfigError("k_win must be odd and positive")
        if not 0.0 <= self.exp_freeze_frac <= 1.0:
            raise ConfigError("exp_freeze_frac must be in [0, 1]")
        if self.bank_capacity < 1:
            raise ConfigError("bank_capacity must be positive")

    @property
    def decay_interval(self) -> int:
        return self.decay_every if self.decay_every > 0 else max(1, self.steps // 3)


@dataclass
class RunConfig:
    """Everything one CLI run needs."""

    net: NetConfig = field(default_factory=NetConfig)
    stage: StageConfig = field(default_factory=StageConfig)
    world: WorldConfig = field(default_factory=WorldConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def _schema() -> dict:
    """Known config sections and their field names, from the dataclasses."""
    return {
        "net": {f.name for f in fields(NetConfig)},
        "stage": {f.name for f in fields(StageConfig)},
        "world": {f.name for f in fields(WorldConfig)},
        ("world", "dynamics"): {f.name for f in fields(DynamicsSpec)},
    }


def _apply_overrides(data: dict, overrides) -> dict:
    schema = _schema()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        if len(parts) < 2:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        section = parts[0] if len(parts) == 2 else tuple(parts[:-1])
        leaf = parts[-1]
        if section not in schema or leaf not in schema[section]:
            raise ConfigError(f"unknown config key {key!r}")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config section {p!r} is not an object")
        try:
            node[leaf] = json.loads(raw)
        except json.JSONDecodeError:
            node[leaf] = raw
    return data


def load_run_config(path: Optional[str] = None, overrides=None) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {p}: {exc}") from exc
    data.setdefault("net", {})
    data.setdefault("stage", {})
    data.setdefault("world", {})
    data = _apply_overrides(data, overrides)

    world_kwargs = dict(data["world"])
    dyn = DynamicsSpec(**world_kwargs.pop("dynamics", {}))
    try:
        cfg = RunConfig(
            net=NetConfig(**data["net"]),
            stage=StageConfig(**data["stage"]),
            world=WorldConfig(dynamics=dyn, **world_kwargs),
        )
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from exc
    cfg.stage.validate()
    cfg.world.validate()
    return cfg


def write_resolved_config(cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
