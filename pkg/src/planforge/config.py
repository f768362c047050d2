"""Run configuration: one JSON document, validated on load.

Keys starting with an underscore are treated as comments and ignored; any
other unknown key is an error.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints

from .fmo import SolverOptions
from .marl import Hyper
from .phantom import TEMPLATES, BeamConfig, GridSpec
from .tpp import Registry


class ConfigError(ValueError):
    pass


@dataclass
class PhantomConfig:
    template: str = "hnc"
    nx: int = 64
    ny: int = 64
    voxel_size_mm: float = 3.0
    slice_thickness_mm: float = 3.0
    prescription_gy: float = 60.0
    gantry_angles_deg: list[float] = field(default_factory=lambda: [45.0, 315.0])
    beamlets_per_field: int = 32
    lateral_sigma_mm: float = 4.0
    n_train: int = 10
    n_test: int = 10
    case_seed: int = 7


@dataclass
class TPPConfig:
    resolution: int = 5
    tuned: list[str] | None = None
    fixed: dict[str, float] = field(default_factory=dict)
    bounds: dict[str, list[float]] = field(default_factory=dict)


@dataclass
class SolverConfig:
    max_iters: int = 200
    grad_tol: float = 1e-6
    ftol: float = 1e-6
    step_rule: str = "bb"


@dataclass
class NetworkConfig:
    hidden_dim: int = 128
    rnn_dim: int = 64
    mixer_embed_dim: int = 32
    shared: bool = True


@dataclass
class TrainConfig:
    gamma: float = 0.9
    episode_length: int = 10
    workers: int = 10
    processes: int | None = None
    episodes: int = 500
    batch_episodes: int = 8
    lr: float = 5e-4
    target_sync_period: int = 50
    updates_per_round: int = 4
    grad_clip: float | None = 10.0
    eps_initial: float = 0.9
    eps_decay: float = 0.9
    eps_period: int = 5
    bank_capacity: int = 500
    bootstrap_last: bool = True
    checkpoint_every: int = 10
    torch_threads: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str | None = None
    cases_dir: str | None = None
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    tpp: TPPConfig = field(default_factory=TPPConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        """Run every section through the constructors that enforce its invariants."""
        p, t = self.phantom, self.train
        try:
            if p.template not in TEMPLATES:
                raise ValueError(f"unknown template {p.template!r}")
            self.grid()
            self.beams()
            if p.prescription_gy <= 0 or p.n_train < 1 or p.n_test < 0:
                raise ValueError("prescription must be positive, n_train >= 1, n_test >= 0")
            self.solver_options()
            self.hyper()
            if t.episode_length < 1 or t.workers < 1 or t.episodes < 0 or t.bank_capacity < 1:
                raise ValueError("episode_length, workers and bank_capacity must be >= 1")
            if t.processes is not None and t.processes < 1:
                raise ValueError("processes must be >= 1")
            if t.batch_episodes > t.bank_capacity:
                raise ValueError("batch_episodes cannot exceed bank_capacity")
            if t.checkpoint_every < 1:
                raise ValueError("checkpoint_every must be >= 1")
            self.registry()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def grid(self) -> GridSpec:
        p = self.phantom
        return GridSpec(p.nx, p.ny, p.voxel_size_mm, p.slice_thickness_mm)

    def beams(self) -> BeamConfig:
        p = self.phantom
        return BeamConfig(tuple(float(a) for a in p.gantry_angles_deg), p.beamlets_per_field,
                          p.lateral_sigma_mm)

    def hyper(self) -> Hyper:
        t = self.train
        return Hyper(gamma=t.gamma, lr=t.lr, batch_episodes=t.batch_episodes,
                     target_sync_period=t.target_sync_period, updates_per_round=t.updates_per_round,
                     grad_clip=t.grad_clip, eps_initial=t.eps_initial, eps_decay=t.eps_decay,
                     eps_period=t.eps_period, bootstrap_last=t.bootstrap_last)

    def registry(self) -> Registry:
        bounds = {k: tuple(v) for k, v in self.tpp.bounds.items()} or None
        return Registry.build(tuple(TEMPLATES[self.phantom.template]), self.phantom.prescription_gy,
                              bounds, self.tpp.tuned, self.tpp.fixed, self.tpp.resolution)

    def case_seeds(self, split: str) -> list[int]:
        """Train and test phantoms use disjoint seed ranges derived from case_seed."""
        p = self.phantom
        if split == "train":
            return [p.case_seed * 1000 + i for i in range(p.n_train)]
        if split == "test":
            return [p.case_seed * 1000 + 500 + i for i in range(p.n_test)]
        raise ValueError(f"unknown split {split!r}")

    def solver_options(self) -> SolverOptions:
        return SolverOptions(**dataclasses.asdict(self.solver))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key.startswith("_"):
            continue
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{where}.{key}")
        else:
            kwargs[key] = _check_type(value, hint, f"{where}.{key}")
    return cls(**kwargs)


def _check_type(value, hint, where):
    origin = getattr(hint, "__origin__", None)
    args = getattr(hint, "__args__", ())
    if hint is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if hint in (int, str, bool):
        if type(value) is not hint:
            raise ConfigError(f"{where}: expected {hint.__name__}, got {value!r}")
        return value
    if origin in (list, dict):
        if not isinstance(value, origin):
            raise ConfigError(f"{where}: expected {origin.__name__}, got {value!r}")
        return value
    if args and type(None) in args:  # Optional[...]
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _check_type(value, inner, where)
    return value


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = _build(RunConfig, data, "config")
    for dotted, value in (overrides or {}).items():
        obj = cfg
        *parents, last = dotted.split(".")
        for p in parents:
            obj = getattr(obj, p)
        setattr(obj, last, value)
    return cfg.validate()


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config").validate()
