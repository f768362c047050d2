"""Treatment-planning parameter registry and the action-to-value transform.

Every tunable scalar of the objective set has an integer coordinate x in
[-b, b]; actions in {-1, 0, +1} move it and the coordinate maps linearly onto
[lower_bound, upper_bound].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .phantom import CTV

RESOLUTION = 5
ACTIONS = (-1, 0, 1)

# CTV objectives and their tunable scalars, in parameter-table order.
CTV_OBJECTIVES = (
    ("Max", ("obj_value", "weight")),
    ("Min", ("obj_value", "weight")),
    ("Uniform", ("obj_value", "weight")),
    ("DVHmin", ("dose", "volume", "weight")),
)

# Dose (Gy) an OAR objective is bracketed against: the tolerance the scoring
# rows put on that organ (upper breakpoint, or the dose level of a Vcc row).
OAR_DOSE_LIMITS = {
    "BrainStem": 54.0,
    "SpinalCord": 40.0,
    "OpticChiasm": 40.0,
    "Opt_R": 40.0,
    "Opt_L": 40.0,
    "TemporalLobe_R": 40.0,
    "TemporalLobe_L": 40.0,
    "Mandible": 40.0,
    "TMJ_R": 40.0,
    "TMJ_L": 40.0,
    "Parotid_R": 25.0,
    "Parotid_L": 25.0,
    "Lens_R": 10.0,
    "Lens_L": 10.0,
    "Eye_R": 40.0,
    "Eye_L": 40.0,
    "InnerEar_R": 40.0,
    "InnerEar_L": 40.0,
}

WEIGHT_BOUNDS = (0.0, 100.0)


@dataclass(frozen=True)
class ParameterSpec:
    index: int
    organ: str
    objective: str
    role: str
    lower_bound: float
    upper_bound: float

    def __post_init__(self):
        if not self.lower_bound < self.upper_bound:
            raise ValueError(f"{self.name}: lower bound must be below upper bound")

    @property
    def name(self) -> str:
        return f"{self.organ}.{self.objective}.{self.role}"

    @property
    def midpoint(self) -> float:
        return tuned_value(0, self.lower_bound, self.upper_bound)


def default_bounds(organ: str, objective: str, role: str, prescription_gy: float) -> tuple[float, float]:
    if role == "weight":
        return WEIGHT_BOUNDS
    rx = prescription_gy
    if organ == CTV:
        if objective in ("Max", "Uniform"):
            return (0.9 * rx, 1.1 * rx)
        if objective == "Min":
            return (0.95 * rx, 1.05 * rx)
        if role == "dose":
            return (0.9 * rx, 1.0 * rx)
        if role == "volume":
            return (0.90, 1.0)
    limit = OAR_DOSE_LIMITS[organ]
    return (0.3 * limit, 1.0 * limit)


def build_specs(structures: Sequence[str], prescription_gy: float = 60.0,
                bounds: Mapping[str, Sequence[float]] | None = None) -> tuple[ParameterSpec, ...]:
    """All tunable scalars for the given structures, in parameter-table order."""
    bounds = dict(bounds or {})
    slots = []
    for organ in structures:
        objectives = CTV_OBJECTIVES if organ == CTV else (("Max", ("obj_value", "weight")),)
        for objective, roles in objectives:
            slots.extend((organ, objective, role) for role in roles)
    specs = []
    for i, (organ, objective, role) in enumerate(slots):
        name = f"{organ}.{objective}.{role}"
        lb, ub = bounds.pop(name, default_bounds(organ, objective, role, prescription_gy))
        specs.append(ParameterSpec(i, organ, objective, role, float(lb), float(ub)))
    if bounds:
        raise KeyError(f"bounds given for unknown parameters: {sorted(bounds)}")
    return tuple(specs)


def tuned_value(x, lower, upper, b: int = RESOLUTION):
    """Linear action-to-value map with clamping at +-b.

    Works on any numeric type, so exact (Fraction) arithmetic passes through.
    """
    if x >= b:
        return upper
    if x <= -b:
        return lower
    return lower + (x + b) / (2 * b) * (upper - lower)


def to_values(x: np.ndarray, lower: np.ndarray, upper: np.ndarray, b: int = RESOLUTION) -> np.ndarray:
    """Vectorized :func:`tuned_value`."""
    x = np.asarray(x)
    frac = np.clip((x + b) / (2 * b), 0.0, 1.0)
    mid = lower + frac * (upper - lower)
    return np.where(x >= b, upper, np.where(x <= -b, lower, mid))


def apply_actions(x: np.ndarray, a: np.ndarray, b: int = RESOLUTION) -> np.ndarray:
    """Move each coordinate by its action; coordinates are kept inside [-b, b]."""
    a = np.asarray(a)
    if a.shape != np.shape(x) or not np.isin(a, ACTIONS).all():
        raise ValueError("actions must match x in shape and lie in {-1, 0, 1}")
    return np.clip(np.asarray(x) + a, -b, b)


@dataclass
class TunerState:
    x: np.ndarray
    b: int = RESOLUTION

    @classmethod
    def initial(cls, n: int, b: int = RESOLUTION) -> "TunerState":
        return cls(np.zeros(n, dtype=np.int64), b)

    def step(self, actions: np.ndarray) -> "TunerState":
        return TunerState(apply_actions(self.x, actions, self.b), self.b)


@dataclass(frozen=True)
class Registry:
    """Parameter specs plus which of them are tuned by agents.

    Untuned parameters hold a fixed value (their bound midpoint unless given).
    """
    specs: tuple[ParameterSpec, ...]
    tuned: tuple[int, ...]
    fixed: Mapping[int, float] = field(default_factory=dict)
    b: int = RESOLUTION

    @classmethod
    def build(cls, structures: Sequence[str], prescription_gy: float = 60.0,
              bounds=None, tuned: Sequence[str] | None = None,
              fixed: Mapping[str, float] | None = None, b: int = RESOLUTION) -> "Registry":
        specs = build_specs(structures, prescription_gy, bounds)
        names = [s.name for s in specs]
        if tuned is None:
            tuned_idx = tuple(range(len(specs)))
        else:
            unknown = [t for t in tuned if t not in names]
            if unknown:
                raise KeyError(f"unknown tuned parameters: {unknown}")
            tuned_idx = tuple(names.index(t) for t in tuned)
        fixed_idx = {}
        for name, value in (fixed or {}).items():
            if name not in names:
                raise KeyError(f"unknown fixed parameter: {name}")
            fixed_idx[names.index(name)] = float(value)
        if b < 1:
            raise ValueError("tuning resolution b must be >= 1")
        return cls(specs, tuned_idx, fixed_idx, b)

    @property
    def n_agents(self) -> int:
        return len(self.tuned)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def lower(self) -> np.ndarray:
        return np.array([s.lower_bound for s in self.specs])

    @property
    def upper(self) -> np.ndarray:
        return np.array([s.upper_bound for s in self.specs])

    def values(self, x: np.ndarray) -> np.ndarray:
        """Full parameter vector for the tuned coordinates ``x``."""
        out = np.array([self.fixed.get(i, s.midpoint) for i, s in enumerate(self.specs)])
        idx = list(self.tuned)
        out[idx] = to_values(x, self.lower[idx], self.upper[idx], self.b)
        return out
