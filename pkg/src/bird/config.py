"""Run configuration with a flat ``key=value`` text form."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .propagation import ModelConfig

SEED_ENV = "BIRD_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    n_train: int = 5
    n_infer: int = 8
    height: int = 64
    width: int = 64
    lr: float = 2e-4
    epochs: int = 20
    steps: int = 0  # > 0 overrides the epoch budget
    batch_size: int = 2
    lam: float = 5.0
    eta: float = 1.0
    enable_bp: bool = True
    enable_fp: bool = True
    enable_ltmf: bool = True
    enable_gtmf: bool = True
    enable_stf: bool = True
    seed: int = 0
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    eval_score_thresh: float = 0.5
    channels: int = 64
    backbone_width: int = 48
    groups: int = 64
    kernel_size: int = 3
    growth: int = 32
    dense_layers: int = 4
    n_agrd: int = 3
    rdb_per_agrd: int = 2
    n_rdca: int = 3
    num_classes: int = 1
    data: str = ""
    run_dir: str = ""

    def validate(self) -> "RunConfig":
        if self.n_train < 3:
            raise ConfigError(f"n_train must be at least 3, got {self.n_train}")
        if self.n_infer < 1:
            raise ConfigError(f"n_infer must be at least 1, got {self.n_infer}")
        if self.height % 8 or self.width % 8:
            raise ConfigError("input size must be divisible by 8")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size and lr must be positive")
        if self.channels % self.groups:
            raise ConfigError("channels must be divisible by groups")
        return self

    @property
    def effective_eta(self) -> float:
        return self.eta if self.enable_stf else 0.0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone_width=self.backbone_width,
            channels=self.channels,
            groups=self.groups,
            kernel_size=self.kernel_size,
            growth=self.growth,
            dense_layers=self.dense_layers,
            n_agrd=self.n_agrd,
            rdb_per_agrd=self.rdb_per_agrd,
            n_rdca=self.n_rdca,
            num_classes=self.num_classes,
            enable_bp=self.enable_bp,
            enable_fp=self.enable_fp,
            enable_ltmf=self.enable_ltmf,
            enable_gtmf=self.enable_gtmf,
        )

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _parse(types[key], raw)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
        return cls(**values)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def with_env(self) -> "RunConfig":
        """Apply the ``BIRD_SEED`` override, if set."""
        raw = os.environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        try:
            return self.replace(seed=int(raw))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from exc


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(typ, raw: str):
    t = typ if isinstance(typ, str) else typ.__name__
    if t == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw
