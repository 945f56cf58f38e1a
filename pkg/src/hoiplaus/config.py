"""Global thresholds and solver settings shared by every subcommand."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass(frozen=True)
class GlobalConfig:
    c_contact: float = 0.002
    c_tangent: float = 0.01
    c_pd: float = 0.015
    c_fe: float = 0.1
    mu: float = 0.8
    mass: float = 1.0
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    n_samples: int = 1024
    ray_cutoff: float = 0.20
    ray_offset: float = 1e-5
    voxel_size: float = 0.002
    fe_max_iter: int = 2000
    me_max_iter: int = 2000
    fe_tol: float = 1e-7
    me_tol: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        for name in ("c_contact", "c_tangent", "c_pd", "c_fe", "mu", "mass", "ray_cutoff", "voxel_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gravity"] = list(self.gravity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GlobalConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


DEFAULT = GlobalConfig()


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


@dataclass
class Settings:
    """A config file split into its sections; every section is optional."""

    globals: GlobalConfig = field(default_factory=GlobalConfig)
    sections: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "Settings":
        raw = load_json(path)
        g = GlobalConfig.from_dict(raw.pop("global", {}))
        return cls(g, raw)

    def section(self, name: str) -> dict:
        return dict(self.sections.get(name, {}))
