"""Training configuration and its plain-text ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ContractError, DataError

CROP_FRACTION = 144 / 224


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.07
    lam: float = 0.25
    m: float = 0.999
    batch_size: int = 32
    lr: float = 0.03
    lr_milestones: tuple[float, ...] = (0.6, 0.8)
    lr_gamma: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    seed: int = 0
    queue_capacity: int = 4096
    queue_warm_start: str = "full"
    crop_fraction: float = CROP_FRACTION
    key_crop_fraction: float = 0.0
    query_aug: str = "fa"
    key_aug: str = "ma"
    resolution: int = 64
    fae_stages: str = "all"
    prior: str = "ge"
    channels: tuple[int, ...] = (8, 16, 32, 64)
    embed_dim: int = 128
    corpus: str = ""
    output: str = ""
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ContractError(f"lambda must be nonnegative, got {self.lam}")
        if not 0.0 <= self.m < 1.0:
            raise ContractError(f"momentum m must lie in [0, 1), got {self.m}")
        if self.batch_size < 1 or self.epochs < 0 or self.queue_capacity < 1:
            raise ContractError("batch_size, epochs and queue_capacity must be positive")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ContractError(f"crop_fraction must lie in (0, 1], got {self.crop_fraction}")
        if not 0.0 <= self.key_crop_fraction <= 1.0:
            raise ContractError("key_crop_fraction must lie in [0, 1] (0 reuses crop_fraction)")
        for name in ("query_aug", "key_aug"):
            if getattr(self, name) not in ("oc", "fa", "ma"):
                raise ContractError(f"{name} must be oc, fa or ma")
        if self.queue_warm_start not in ("full", "batch"):
            raise ContractError("queue_warm_start must be full or batch")
        if self.fae_stages not in ("all", "last"):
            raise ContractError("fae_stages must be all or last")
        if self.prior not in ("none", "ge", "ed", "cr"):
            raise ContractError("prior must be none, ge, ed or cr")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def lr_at(self, epoch: int) -> float:
        """Step schedule: multiply by ``lr_gamma`` at each fractional milestone."""
        lr = self.lr
        for frac in self.lr_milestones:
            if epoch >= int(round(frac * self.epochs)):
                lr *= self.lr_gamma
        return lr

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{_file_key(f.name)} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _file_key(name: str) -> str:
    return "lambda" if name == "lam" else name


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, kind):
    kind = str(kind)
    if kind.startswith("tuple[float"):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if kind.startswith("tuple[int"):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if kind == "float":
        return float(raw)
    if kind == "int":
        return int(raw)
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    known = {_file_key(f.name): f for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise DataError(f"config line {lineno}: unknown key {key!r}")
        f = known[key]
        try:
            values[f.name] = _parse_value(raw, f.type)
        except ValueError as exc:
            raise DataError(f"config line {lineno}: bad value for {key}: {raw!r}") from exc
    cfg = dataclasses.replace(base or TrainConfig(), **values)
    return cfg


def load_config(path: str | os.PathLike, env: dict | None = None) -> TrainConfig:
    """Read a config file; ``CLIC_SEED`` in the environment overrides ``seed``."""
    env = os.environ if env is None else env
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text)
    if env.get("CLIC_SEED"):
        try:
            cfg = cfg.replace(seed=int(env["CLIC_SEED"]))
        except ValueError as exc:
            raise DataError(f"CLIC_SEED must be an integer, got {env['CLIC_SEED']!r}") from exc
    return cfg


__all__ = ["TrainConfig", "parse_config", "load_config", "CROP_FRACTION"]
