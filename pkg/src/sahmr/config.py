"""Run configuration with a field-exact JSON round trip."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError, MissingInputError

VARIANTS = ("sa-hmr", "oracle-root", "oracle-contact", "oracle-both", "trunk-only", "trunk-saopt")

# frame seed offsets per split; a run seed shifts all of them
SPLIT_BASE = {"train": 0, "test": 10_000, "pretrain": 20_000}
SEED_STRIDE = 1_000_000


@dataclass
class RunConfig:
    gamma1: float = 1.25
    gamma2: float = 0.5
    voxel_size: float = 0.05
    contact_threshold: float = 0.07
    w_rz: float = 10.0
    crop_size: int = 224
    seed: int = 0
    n_pretrain: int = 512
    n_train: int = 64
    n_test: int = 200
    stage1_steps: int = 1100
    stage1_lr: float = 2e-3
    voxels_per_frame: int = 192
    stage1_hidden: int = 128
    mesh_steps: int = 1500
    mesh_lr: float = 0.15
    mesh_batch: int = 16
    root_noise: float = 0.02  # jitter on oracle roots fed to stage 2 during training
    detector_noise: float = 1.5  # pixels, simulated 2D joints for the optimizer
    saopt_iters: int = 200
    saopt_weights: tuple = (1.0, 10.0, 10.0, 1.0)
    variant: str = "all"
    data_dir: str = "data"
    out_dir: str = "out"
    checkpoint_dir: str = "checkpoints"
    workers: int = 1
    deterministic: bool = True

    def __post_init__(self):
        self.saopt_weights = tuple(float(w) for w in self.saopt_weights)
        for name in ("gamma1", "gamma2", "voxel_size", "contact_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.w_rz < 0:
            raise ConfigError("w_rz must be nonnegative")
        if self.crop_size != 224:
            raise ConfigError("the toy heads are built for 224-pixel crops")
        for name in ("n_train", "n_test", "n_pretrain", "stage1_steps", "mesh_steps", "saopt_iters",
                     "workers", "mesh_batch", "voxels_per_frame", "stage1_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if len(self.saopt_weights) != 4 or min(self.saopt_weights) < 0:
            raise ConfigError("saopt_weights needs four nonnegative entries")
        if self.variant != "all" and self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {('all',) + VARIANTS}")

    @property
    def variants(self):
        return VARIANTS if self.variant == "all" else (self.variant,)

    def frame_seed(self, split, i):
        return self.seed * SEED_STRIDE + SPLIT_BASE[split] + i

    def to_dict(self):
        d = asdict(self)
        d["saopt_weights"] = list(self.saopt_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def with_overrides(self, **kw):
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_dict(d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"no config at {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)
