"""Run configuration, named profiles and YAML loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .octree import SEMI_SPARSE, SPARSE, OctreeConfig
from .residual import HashGridConfig, MlpConfig
from .sampling import SamplingConfig


@dataclass(frozen=True)
class LossWeights:
    recon_surface: float = 1000.0
    recon_perturbed: float = 200.0
    eik_surface: float = 10.0
    eik_free: float = 3.0
    proj: float = 100.0

    def __post_init__(self):
        if any(v < 0 for v in dataclasses.astuple(self)):
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    iters_per_frame: int = 10
    lr_network: float = 1e-3
    lr_octree: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    fd_eps: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.lr_network <= 0 or self.lr_octree <= 0:
            raise ValueError("step sizes must be positive")
        if self.fd_eps <= 0:
            raise ValueError("finite-difference step must be positive")


@dataclass(frozen=True)
class RunConfig:
    octree: OctreeConfig = field(default_factory=OctreeConfig)
    hashgrid: HashGridConfig = field(default_factory=HashGridConfig)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    octree_mode: str = SEMI_SPARSE
    residual: bool = True
    gradient_augmented: bool = True
    debug_inject_nan: bool = False

    def __post_init__(self):
        if self.octree_mode not in (SEMI_SPARSE, SPARSE):
            raise ValueError(f"octree_mode must be {SEMI_SPARSE!r} or {SPARSE!r}")
        if self.mlp.input_dim != self.hashgrid.output_dim:
            raise ValueError("mlp.input_dim must equal hashgrid levels * features")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_SECTIONS = {
    "octree": OctreeConfig,
    "hashgrid": HashGridConfig,
    "mlp": MlpConfig,
    "weights": LossWeights,
    "train": TrainConfig,
    "sampling": SamplingConfig,
}

PROFILES = {
    "paper-defaults": {},
    "desk-scale": {
        "octree": {"depth": 7, "semi_sparse_depth": 4, "resolution": 0.05,
                   "root_min": [-1.6, -1.6, -1.6]},
        "sampling": {"rays": 2048},
        "train": {"iters_per_frame": 10},
    },
}

# named ablation variants, applied on top of a profile
VARIANTS = {
    "full": {},
    "prior-only": {"residual": False},
    "sparse-octree": {"octree_mode": SPARSE},
    "no-grad-aug": {"gradient_augmented": False},
    "no-proj": {"weights": {"proj": 0.0}},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(doc: dict) -> RunConfig:
    doc = dict(doc or {})
    kwargs = {}
    try:
        for name, cls in _SECTIONS.items():
            sub = dict(doc.pop(name, None) or {})
            if name == "mlp" and "input_dim" not in sub:
                sub["input_dim"] = kwargs["hashgrid"].output_dim
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(sub) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
            kwargs[name] = cls(**{k: tuple(v) if isinstance(v, list) else v
                                  for k, v in sub.items()})
        top = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
        unknown = set(doc) - top - {"profile", "variant"}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        for k in top & set(doc):
            kwargs[k] = doc[k]
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def make_config(profile: str = "desk-scale", overrides: dict | None = None,
                variant: str = "full") -> RunConfig:
    """Profile defaults, then a variant, then explicit overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    doc = _merge(PROFILES[profile], VARIANTS[variant])
    doc = _merge(doc, overrides or {})
    return from_dict(doc)


def load_config(path=None, profile: str | None = None, variant: str | None = None) -> RunConfig:
    """Read a YAML config file; a ``profile``/``variant`` key inside it selects the base.

    Explicit ``profile``/``variant`` arguments win over keys in the file.
    """
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping")
    doc = dict(doc)
    prof = profile or doc.pop("profile", "desk-scale")
    doc.pop("profile", None)
    file_variant = doc.pop("variant", "full")
    return make_config(prof, doc, variant or file_variant)


def config_from_json(text: str) -> RunConfig:
    return from_dict(json.loads(text))
