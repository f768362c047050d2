"""Weighted multi-objective fluence-map optimization.

Objective forms (all are means over the organ's voxels, so weights compare
across organ sizes):

* Max:     w * mean(max(0, d - D)^2)
* Min:     w * mean(max(0, D - d)^2)
* Uniform: w * mean((d - D)^2)
* DVHmin:  w * mean over the ceil(V*n) hottest voxels of max(0, D - d)^2

The solver is projected gradient descent onto f >= 0 with Barzilai-Borwein
steps safeguarded by Armijo backtracking; the first step is the exact
minimizer of the Gauss-Newton model along the gradient.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .phantom import Case, StructureSet, dose as forward_dose
from .plan_eval import PlanState, compute_dvh
from .tpp import ParameterSpec

KINDS = ("Max", "Min", "Uniform", "DVHmin")

# Relative size of the evaluation noise in the objective.  Steps that raise F
# by less than this are treated as non-increasing.
ROUNDING = 1e-12


class FMOError(RuntimeError):
    """Numerical failure inside the optimizer."""


@dataclass(frozen=True)
class Objective:
    organ: str
    kind: str
    obj_value_gy: float
    weight: float
    dvh_volume_frac: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.weight < 0 or self.obj_value_gy < 0:
            raise ValueError(f"{self.organ} {self.kind}: weight and dose threshold must be >= 0")
        if not 0 < self.dvh_volume_frac <= 1:
            raise ValueError(f"{self.organ} {self.kind}: volume fraction must be in (0, 1]")


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 200
    grad_tol: float = 1e-6   # projected-gradient 2-norm treated as stationary
    ftol: float = 1e-6       # stop once an iteration decreases the objective by less than this fraction
    step_rule: str = "bb"    # "bb" (Barzilai-Borwein + Armijo) or "fixed" (Armijo from the first step)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.grad_tol <= 0 or self.ftol < 0:
            raise ValueError("grad_tol must be positive and ftol nonnegative")
        if self.step_rule not in ("bb", "fixed"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


# -- single objectives -----------------------------------------------------------

def _hot_count(obj: Objective, n: int) -> int:
    return max(1, math.ceil(obj.dvh_volume_frac * n - 1e-9))


def _residual(obj: Objective, d: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Signed residual r (penalty = w * sum(r^2) / denom), the voxels it lives on, and denom."""
    D = obj.obj_value_gy
    if obj.kind == "Max":
        return np.maximum(d - D, 0.0), slice(None), d.size
    if obj.kind == "Min":
        return -np.maximum(D - d, 0.0), slice(None), d.size
    if obj.kind == "Uniform":
        return d - D, slice(None), d.size
    k = _hot_count(obj, d.size)
    hot = np.argpartition(-d, k - 1)[:k] if k < d.size else np.arange(d.size)
    return -np.maximum(D - d[hot], 0.0), hot, k


def penalty_and_dose_grad(obj: Objective, d: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted penalty of one objective and its gradient w.r.t. the organ doses ``d``."""
    r, where, denom = _residual(obj, d)
    grad = np.zeros_like(d)
    grad[where] = 2.0 * obj.weight * r / denom
    return obj.weight * float(r @ r) / denom, grad


def objective_value(obj: Objective, dose: np.ndarray, structures: StructureSet) -> float:
    d = np.asarray(dose, dtype=float).ravel()[structures.flat(obj.organ)]
    if d.size == 0:
        raise ValueError(f"organ {obj.organ} has no voxels")
    return penalty_and_dose_grad(obj, d)[0]


def objective_gradient(obj: Objective, dose: np.ndarray, influence: np.ndarray,
                       structures: StructureSet) -> np.ndarray:
    """Gradient with respect to fluence, chained through d = I f."""
    idx = structures.flat(obj.organ)
    d = np.asarray(dose, dtype=float).ravel()[idx]
    _, gd = penalty_and_dose_grad(obj, d)
    return influence[idx].T @ gd


# -- objective sets --------------------------------------------------------------

def build_objectives(specs: Sequence[ParameterSpec], values: Sequence[float]) -> list[Objective]:
    """Assemble objectives from parameter specs and their current values."""
    if len(specs) != len(values):
        raise ValueError(f"{len(values)} values for {len(specs)} parameters")
    slots: dict[tuple[str, str], dict[str, float]] = {}
    for spec, v in zip(specs, values):
        slots.setdefault((spec.organ, spec.objective), {})[spec.role] = float(v)
    out = []
    for (organ, kind), p in slots.items():
        if kind == "DVHmin":
            out.append(Objective(organ, kind, p["dose"], p["weight"], p["volume"]))
        else:
            out.append(Objective(organ, kind, p["obj_value"], p["weight"]))
    return out


def objectives_to_json(objectives: Sequence[Objective]) -> str:
    return json.dumps([asdict(o) for o in objectives], indent=1)


def objectives_from_json(text: str) -> list[Objective]:
    return [Objective(**o) for o in json.loads(text)]


# -- the solver ------------------------------------------------------------------

class Problem:
    """Objectives bound to the influence rows of the voxels they touch."""

    def __init__(self, influence: np.ndarray, objectives: Sequence[Objective],
                 structures: StructureSet):
        self.objectives = [o for o in objectives if o.weight > 0]
        organs = sorted({o.organ for o in self.objectives}, key=structures.index)
        flat = {name: structures.flat(name) for name in organs}
        rows = np.unique(np.concatenate([flat[n] for n in organs])) if organs else np.zeros(0, int)
        self.rows = rows
        self.A = np.ascontiguousarray(influence[rows])
        self.local = {n: np.searchsorted(rows, flat[n]) for n in organs}
        self.n_beamlets = influence.shape[1]

    def value_grad(self, f: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        d = self.A @ f
        total = 0.0
        gd = np.zeros_like(d)
        for o in self.objectives:
            idx = self.local[o.organ]
            val, g = penalty_and_dose_grad(o, d[idx])
            total += val
            gd[idx] += g
        return total, self.A.T @ gd, d

    def value(self, f: np.ndarray) -> float:
        d = self.A @ f
        return sum(penalty_and_dose_grad(o, d[self.local[o.organ]])[0] for o in self.objectives)

    def curvature(self, d: np.ndarray, direction: np.ndarray) -> float:
        """direction^T H direction for the Gauss-Newton Hessian at dose d."""
        Ad = self.A @ direction
        total = 0.0
        for o in self.objectives:
            idx = self.local[o.organ]
            r, where, denom = _residual(o, d[idx])
            a = Ad[idx][where]
            if o.kind != "Uniform":
                a = a[r != 0]
            total += 2.0 * o.weight / denom * float(a @ a)
        return total


    def hessian(self, d: np.ndarray) -> np.ndarray:
        """Gauss-Newton Hessian at dose d (exact on the current quadratic pieces)."""
        H = np.zeros((self.n_beamlets, self.n_beamlets))
        for o in self.objectives:
            idx = self.local[o.organ]
            r, where, denom = _residual(o, d[idx])
            rows = self.A[idx][where]
            if o.kind != "Uniform":
                rows = rows[r != 0]
            H += (2.0 * o.weight / denom) * (rows.T @ rows)
        return H

    def newton_step(self, f: np.ndarray, g: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Projected Gauss-Newton point: Newton on the free variables, bounds held on the rest."""
        free = (f > 0) | (g < 0)
        p = np.zeros_like(f)
        if free.any():
            H = self.hessian(d)[np.ix_(free, free)]
            p[free] = -np.linalg.lstsq(H, g[free], rcond=None)[0]
        return np.maximum(f + p, 0.0)


def projected_gradient_norm(f: np.ndarray, g: np.ndarray) -> float:
    return float(np.linalg.norm(f - np.maximum(f - g, 0.0)))


@dataclass
class SolveResult:
    fluence: np.ndarray
    objective: float
    history: list[float]
    pg_norm: float
    iterations: int


def solve(problem: Problem, warm_start: np.ndarray, opts: SolverOptions = SolverOptions()) -> SolveResult:
    f = np.asarray(warm_start, dtype=float).copy()
    if f.shape != (problem.n_beamlets,):
        raise ValueError("warm start length must equal the beamlet count")
    if np.any(f < 0):
        raise ValueError("warm start must be nonnegative")
    F, g, d = problem.value_grad(f)
    history = [F]
    if not np.isfinite(F):
        raise FMOError("objective is not finite at the warm start")
    pg = projected_gradient_norm(f, g)
    step = None
    it = 0
    for it in range(1, opts.max_iters + 1):
        if pg <= opts.grad_tol:
            it -= 1
            break
        if step is None:
            curv = problem.curvature(d, g)
            step = float(g @ g) / curv if curv > 0 else 1.0
        t = step
        while True:
            f_new = np.maximum(f - t * g, 0.0)
            if np.array_equal(f_new, f):  # the step is below the resolution of f
                f_new, F_new, g_new, d_new = _newton_fallback(problem, f, F, g, d, pg)
                break
            F_new, g_new, d_new = problem.value_grad(f_new)
            if not np.isfinite(F_new):
                raise FMOError("objective overflowed during line search")
            if F_new <= F + 1e-4 * float(g @ (f_new - f)):
                break
            # Near the optimum the sufficient decrease can fall below the rounding
            # of F; a non-increasing step that shrinks the projected gradient is
            # still progress.
            if F_new <= F and projected_gradient_norm(f_new, g_new) < pg:
                break
            t *= 0.5
            if t < 1e-30:
                f_new, F_new, g_new, d_new = _newton_fallback(problem, f, F, g, d, pg)
                break
        s, y = f_new - f, g_new - g
        decrease = F - F_new
        f, F, g, d = f_new, F_new, g_new, d_new
        history.append(F)
        pg = projected_gradient_norm(f, g)
        if not s.any() or (opts.ftol > 0 and decrease <= opts.ftol * max(abs(history[-2]), 1e-300)):
            break
        if opts.step_rule == "bb":
            sy = float(s @ y)
            step = float(s @ s) / sy if sy > 0 else 2.0 * t
        else:
            step = t
    return SolveResult(f, F, history, pg, it)


def _newton_fallback(problem: Problem, f, F, g, d, pg):
    """Try a projected Gauss-Newton step once gradient steps stop making progress."""
    f_new = problem.newton_step(f, g, d)
    F_new, g_new, d_new = problem.value_grad(f_new)
    if (np.isfinite(F_new) and F_new <= F + ROUNDING * abs(F)
            and projected_gradient_norm(f_new, g_new) < pg):
        return f_new, F_new, g_new, d_new
    return f, F, g, d


def solve_fmo(influence: np.ndarray, objectives: Sequence[Objective], warm_start: np.ndarray,
              structures: StructureSet, opts: SolverOptions = SolverOptions()) -> np.ndarray:
    """Fluence minimizing the weighted objective sum, started from ``warm_start``."""
    return solve(Problem(influence, objectives, structures), warm_start, opts).fluence


# -- environment transition ------------------------------------------------------------

def step_environment(case: Case, specs: Sequence[ParameterSpec], values: Sequence[float],
                     prev_fluence: np.ndarray | None = None,
                     opts: SolverOptions = SolverOptions(), step_index: int = 0) -> PlanState:
    """Optimize with the given parameter values warm-started at ``prev_fluence``.

    The first step of an episode passes ``prev_fluence=None`` (a zero fluence).
    """
    objectives = build_objectives(specs, values)
    if prev_fluence is None:
        prev_fluence = np.zeros(case.n_beamlets)
    problem = Problem(case.influence, objectives, case.structures)
    result = solve(problem, prev_fluence, opts)
    d = forward_dose(case.influence, result.fluence)
    return PlanState(
        dvh=compute_dvh(d, case.structures, case.prescription_gy),
        dose=d,
        fluence=result.fluence,
        step_index=step_index,
        objective=result.objective,
    )
