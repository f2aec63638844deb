"""Training/evaluation configuration and ablation presets."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .data import ConfigError
from .expand import ExpansionConfig
from .heads import HEAD_KINDS


@dataclass
class TrainConfig:
    way: int = 5
    shot: int = 1
    queries_per_class: int = 15
    alpha: int | None = None  # inner iterations; None -> 4 (1-shot) / 6 (otherwise)
    lambda_rot: float = 0.1
    inner_lr: float = 1e-3
    inner_momentum: float = 0.9
    outer_lr: float = 1e-4
    episodes: int = 200
    seed: int = 0
    head: str = "proto"
    # ablation axes
    wsol_rot: bool = True
    wsol_exc_rot: bool = True
    whole_rot: bool = False
    td_enabled: bool = True
    # expansion
    g_self: int = 1
    g_exch: int = 3
    tau: float = 0.7
    p_rc: float = 0.5
    cam_variant: str = "mean"  # mean | prototype
    # inner episodes
    inner_shot: int | None = None  # None -> same as shot
    m_prime: int | None = None  # total inner queries; None -> min(available, 5) per class
    rot_hidden: int = 256
    # model / data
    image_size: int = 84
    width: int = 64
    squared_distance: bool = True
    source: str = "synthA"
    target: str = "synthB"
    images_per_class: int = 40
    data_seed: int = 0
    # schedule
    val_every: int = 50
    val_episodes: int = 100
    eval_episodes: int = 600

    @property
    def inner_iterations(self) -> int:
        if self.alpha is not None:
            return self.alpha
        return 4 if self.shot == 1 else 6

    @property
    def inner_support_shot(self) -> int:
        return self.shot if self.inner_shot is None else self.inner_shot

    def expansion(self) -> ExpansionConfig:
        return ExpansionConfig(self.wsol_rot, self.wsol_exc_rot, self.whole_rot, self.g_self, self.g_exch, self.p_rc)

    @property
    def expands(self) -> bool:
        return self.wsol_rot or self.wsol_exc_rot or self.whole_rot

    def validate(self) -> "TrainConfig":
        problems = []
        if self.way < 2 or self.shot < 1 or self.queries_per_class < 1:
            problems.append("way >= 2, shot >= 1 and queries_per_class >= 1 are required")
        for name in ("inner_lr", "outer_lr"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        if self.lambda_rot < 0:
            problems.append("lambda_rot must be >= 0")
        if self.alpha is not None and self.alpha < 0:
            problems.append("alpha must be >= 0")
        if self.episodes < 1:
            problems.append("episodes must be >= 1")
        if self.head not in HEAD_KINDS:
            problems.append(f"head must be one of {HEAD_KINDS}")
        if self.cam_variant not in ("mean", "prototype"):
            problems.append("cam_variant must be 'mean' or 'prototype'")
        if not 0 <= self.p_rc <= 1:
            problems.append("p_rc must lie in [0, 1]")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        d = yaml.safe_load(path.read_text()) or {}
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a key: value mapping")
        return cls.from_dict(d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def preset(name: str, base: TrainConfig | None = None) -> TrainConfig:
    """Ablation preset by name (see ``ABLATION_ROWS``)."""
    base = base or TrainConfig()
    try:
        flags = ABLATION_ROWS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(ABLATION_ROWS)}") from None
    return base.replace(**flags)


def _row(wsol_rot=False, wsol_exc_rot=False, whole_rot=False, td_enabled=False):
    return dict(wsol_rot=wsol_rot, wsol_exc_rot=wsol_exc_rot, whole_rot=whole_rot, td_enabled=td_enabled)


# The nine component combinations of the ablation grid, baseline first and full method last.
ABLATION_ROWS = {
    "protonet": _row(),
    "wsol_rot": _row(wsol_rot=True),
    "wsol_exc_rot": _row(wsol_exc_rot=True),
    "whole_rot": _row(whole_rot=True),
    "td": _row(td_enabled=True),
    "wsol_rot+td": _row(wsol_rot=True, td_enabled=True),
    "wsol_exc_rot+td": _row(wsol_exc_rot=True, td_enabled=True),
    "whole_rot+td": _row(whole_rot=True, td_enabled=True),
    "st": _row(wsol_rot=True, wsol_exc_rot=True, td_enabled=True),
}
