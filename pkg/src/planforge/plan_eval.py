"""DVHs, plan metrics and the piecewise clinical scoring system."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .phantom import CTV, Case, GridSpec, StructureSet

N_BINS = 150
DVH_RANGE = 1.5  # top bin edge as a multiple of the prescription


@dataclass(frozen=True, eq=False)
class PlanState:
    """Result of one optimization: the DVH state plus the dose and fluence behind it."""
    dvh: np.ndarray       # (n_structures, N_BINS)
    dose: np.ndarray      # (n_voxels,)
    fluence: np.ndarray   # (n_beamlets,)
    step_index: int = 0
    objective: float = float("nan")


@dataclass(frozen=True)
class MetricSpec:
    """A plan quantity of interest.

    kind is one of ``Vrel`` (fraction of volume >= arg * prescription),
    ``Vcc`` (absolute volume in cc >= arg Gy), ``Dmax``, ``Dq`` (dose to the
    hottest arg percent), ``Dmean``, ``CI`` and ``HI``.
    """
    structure: str
    kind: str
    arg: float | None = None

    @property
    def label(self) -> str:
        if self.kind == "Vrel":
            return f"{self.structure} V{self.arg * 100:g}%"
        if self.kind == "Vcc":
            return f"{self.structure} V{self.arg:g}cc"
        if self.kind == "Dq":
            return f"{self.structure} D{self.arg:g}%"
        return f"{self.structure} {self.kind}"


@dataclass(frozen=True)
class Criterion:
    """One scoring row, stored with the coefficients exactly as tabulated.

    score(v) = low                                  v <= 0
             = low + rise / knee * v                0 < v <= knee
             = knee_score + drop / span * (v - knee) knee < v <= limit
             = high                                 v > limit
    """
    metric: MetricSpec
    low: float
    rise: float
    knee: float
    knee_score: float
    drop: float
    span: float
    limit: float
    high: float

    def score(self, v: float) -> float:
        if v <= 0:
            return self.low
        if v <= self.knee:
            return self.low + self.rise / self.knee * v
        if v <= self.limit:
            return self.knee_score + self.drop / self.span * (v - self.knee)
        return self.high

    @property
    def max_score(self) -> float:
        return max(self.low, self.knee_score, self.high)

    @property
    def min_score(self) -> float:
        return min(self.low, self.knee_score, self.high)

    @property
    def breakpoints(self) -> tuple[float, float, float]:
        return (0.0, self.knee, self.limit)


def _oar(structure, kind, arg, top, knee, drop_to_knee, limit):
    # OAR rows all read: top - a/knee*v ; (top - a) - (top - a)/(limit - knee)*(v - knee) ; 0
    knee_score = round(top - drop_to_knee, 10)
    return Criterion(MetricSpec(structure, kind, arg), top, -drop_to_knee, knee,
                     knee_score, -knee_score, round(limit - knee, 10), limit, 0.0)


CRITERIA: tuple[Criterion, ...] = (
    Criterion(MetricSpec(CTV, "Vrel", 0.95), -40, 52, 0.98, 12, 28, 0.02, 1, 40),
    Criterion(MetricSpec(CTV, "Vrel", 1.05), 20, -14, 0.1, 6, -6, 0.9, 1, 0),
    Criterion(MetricSpec(CTV, "CI"), 0, 6, 0.6, 6, 14, 0.4, 1, 20),
    Criterion(MetricSpec(CTV, "HI"), 20, -14, 0.1, 6, -6, 0.9, 1, 0),
    _oar("BrainStem", "Dmax", None, 7.2, 45, 1.2, 54),
    _oar("BrainStem", "Dq", 1, 7.2, 38.5, 1.2, 50),
    _oar("SpinalCord", "Dmax", None, 14.4, 30, 2.4, 40),
    _oar("OpticChiasm", "Dq", 20, 14.4, 30, 2.4, 40),
    _oar("Opt_R", "Dq", 20, 7.2, 30, 1.2, 40),
    _oar("Opt_L", "Dq", 20, 7.2, 30, 1.2, 40),
    _oar("TemporalLobe_R", "Vcc", 40, 3.6, 7.66, 0.6, 10),
    _oar("TemporalLobe_R", "Vcc", 50, 3.6, 4.66, 0.6, 6),
    _oar("TemporalLobe_L", "Vcc", 40, 3.6, 7.66, 0.6, 10),
    _oar("TemporalLobe_L", "Vcc", 50, 3.6, 4.66, 0.6, 6),
    _oar("Mandible", "Dmean", None, 6, 30, 1, 40),
    _oar("TMJ_R", "Dmean", None, 3, 30, 0.5, 40),
    _oar("TMJ_L", "Dmean", None, 3, 30, 0.5, 40),
    _oar("Parotid_R", "Dmean", None, 3, 21, 0.5, 25),
    _oar("Parotid_L", "Dmean", None, 3, 21, 0.5, 25),
    _oar("Lens_R", "Dq", 1, 3, 6, 0.5, 10),
    _oar("Lens_L", "Dq", 1, 3, 6, 0.5, 10),
    _oar("Eye_R", "Dmean", None, 1.8, 30, 0.3, 40),
    _oar("Eye_L", "Dmean", None, 1.8, 30, 0.3, 40),
    _oar("InnerEar_R", "Dmean", None, 2.4, 30, 0.4, 40),
    _oar("InnerEar_L", "Dmean", None, 2.4, 30, 0.4, 40),
)

# Sum of the per-row maxima over all 25 rows.
MAX_SCORE = 204.4


def criteria_for(structures: Iterable[str]) -> tuple[Criterion, ...]:
    present = set(structures)
    return tuple(c for c in CRITERIA if c.metric.structure in present)


def max_score(criteria: Sequence[Criterion] = CRITERIA) -> float:
    if len(criteria) == len(CRITERIA):
        return MAX_SCORE
    return float(sum(c.max_score for c in criteria))


def score_metric(spec: MetricSpec | str, v: float) -> float:
    """Score a metric value against its tabulated row (looked up by spec or label)."""
    for c in CRITERIA:
        if c.metric == spec or c.metric.label == spec:
            return c.score(v)
    raise KeyError(f"no scoring row for {spec!r}")


# -- DVH ---------------------------------------------------------------------

def dvh_edges(prescription_gy: float, n_bins: int = N_BINS) -> np.ndarray:
    return np.arange(n_bins) * (DVH_RANGE * prescription_gy / n_bins)


def compute_dvh(dose: np.ndarray, structures: StructureSet, prescription_gy: float,
                n_bins: int = N_BINS) -> np.ndarray:
    """Cumulative DVH matrix: entry (r, k) is the fraction of structure r at >= edge k."""
    dose = np.asarray(dose, dtype=float).ravel()
    edges = dvh_edges(prescription_gy, n_bins)
    out = np.empty((len(structures), n_bins))
    for r, mask in enumerate(structures.masks):
        d = dose[mask.ravel()]
        # bin index of the highest edge each voxel reaches; doses past the top clamp
        reached = np.searchsorted(edges, d, side="right")
        counts = np.bincount(np.minimum(reached, n_bins), minlength=n_bins + 1)[1:]
        out[r] = counts[::-1].cumsum()[::-1] / d.size
    return out


# -- metrics -------------------------------------------------------------------

def dose_at_volume(doses: np.ndarray, percent: float) -> float:
    """Minimum dose to the hottest ``percent`` of the volume (linear rank interpolation)."""
    return float(np.quantile(doses, 1.0 - percent / 100.0))


def conformity_index(dose: np.ndarray, target: np.ndarray, prescription_gy: float) -> float:
    """Paddick CI with the 95 % isodose as prescription isodose volume."""
    piv = dose >= 0.95 * prescription_gy
    n_piv = piv.sum()
    if n_piv == 0:
        return 0.0
    tv_piv = np.count_nonzero(piv & target)
    return tv_piv**2 / (np.count_nonzero(target) * n_piv)


def homogeneity_index(doses: np.ndarray) -> float:
    d50 = dose_at_volume(doses, 50)
    if d50 <= 0:
        return 0.0
    return (dose_at_volume(doses, 2) - dose_at_volume(doses, 98)) / d50


def metric(dose: np.ndarray, structures: StructureSet, spec: MetricSpec, grid: GridSpec,
           prescription_gy: float) -> float:
    dose = np.asarray(dose, dtype=float).ravel()
    mask = structures.masks[structures.index(spec.structure)].ravel()
    d = dose[mask]
    kind = spec.kind
    if kind == "Vrel":
        return float(np.count_nonzero(d >= spec.arg * prescription_gy) / d.size)
    if kind == "Vcc":
        return float(np.count_nonzero(d >= spec.arg) * grid.voxel_volume_cc)
    if kind == "Dmax":
        return float(d.max())
    if kind == "Dq":
        return dose_at_volume(d, spec.arg)
    if kind == "Dmean":
        return float(d.mean())
    if kind == "CI":
        return float(conformity_index(dose, mask, prescription_gy))
    if kind == "HI":
        return float(homogeneity_index(d))
    raise ValueError(f"unknown metric kind {kind!r}")


# -- scores --------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreBreakdown:
    labels: tuple[str, ...]
    organs: tuple[str, ...]
    values: np.ndarray
    scores: np.ndarray
    maxima: np.ndarray

    @property
    def total(self) -> float:
        return float(self.scores.sum())

    @property
    def max_total(self) -> float:
        if len(self.labels) == len(CRITERIA):
            return MAX_SCORE
        return float(self.maxima.sum())

    @property
    def relative(self) -> float:
        return self.total / self.max_total

    def rows(self):
        for lab, org, v, s, m in zip(self.labels, self.organs, self.values, self.scores, self.maxima):
            yield {"metric": lab, "value": float(v), "score": float(s), "max_score": float(m), "organ": org}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["metric", "value", "score", "max_score", "organ"],
                           lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow(row)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "total": self.total,
            "max_total": self.max_total,
            "relative": self.relative,
            "metrics": list(self.rows()),
        }, indent=1)


def score_values(criteria: Sequence[Criterion], values: Sequence[float]) -> ScoreBreakdown:
    values = np.asarray(values, dtype=float)
    return ScoreBreakdown(
        labels=tuple(c.metric.label for c in criteria),
        organs=tuple(c.metric.structure for c in criteria),
        values=values,
        scores=np.array([c.score(v) for c, v in zip(criteria, values)]),
        maxima=np.array([c.max_score for c in criteria]),
    )


def evaluate_dose(dose: np.ndarray, case: Case) -> ScoreBreakdown:
    criteria = criteria_for(case.structures.names)
    values = [metric(dose, case.structures, c.metric, case.grid, case.prescription_gy)
              for c in criteria]
    return score_values(criteria, values)


def plan_score(state, case: Case) -> ScoreBreakdown:
    """Score a PlanState (anything with a ``dose`` attribute) on its case."""
    return evaluate_dose(state.dose, case)


def reward(next_score: float, max_total: float = MAX_SCORE) -> float:
    """Absolute reward: the next plan's score centered at half the attainable maximum."""
    return next_score - 0.5 * max_total


# -- DVH files -------------------------------------------------------------------

BODY = "BODY"


def dvh_to_csv(dvh: np.ndarray, names: Sequence[str], prescription_gy: float,
               volumes_cc: Sequence[float] | None = None) -> str:
    """One row per structure: name, volume in cc, then cumulative fractions per bin edge."""
    edges = dvh_edges(prescription_gy, dvh.shape[1])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["structure", "volume_cc"] + [f"{e:.6g}" for e in edges])
    vols = volumes_cc if volumes_cc is not None else [float("nan")] * len(names)
    for name, vol, row in zip(names, vols, dvh):
        w.writerow([name, f"{vol:.6g}"] + [repr(float(x)) for x in row])
    return buf.getvalue()


class DVHFormatError(ValueError):
    pass


def read_dvh_csv(text: str) -> tuple[np.ndarray, dict[str, np.ndarray], dict[str, float]]:
    """Parse a DVH CSV; errors carry the offending line number."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:2] != ["structure", "volume_cc"]:
        raise DVHFormatError("line 1: header must start with 'structure,volume_cc'")
    try:
        edges = np.array([float(x) for x in rows[0][2:]])
    except ValueError as exc:
        raise DVHFormatError(f"line 1: bad bin edge ({exc})") from None
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise DVHFormatError("line 1: bin edges must be strictly increasing")
    curves, volumes = {}, {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != edges.size + 2:
            raise DVHFormatError(f"line {lineno}: expected {edges.size + 2} fields, got {len(row)}")
        try:
            vals = np.array([float(x) for x in row[2:]])
            vol = float(row[1])
        except ValueError as exc:
            raise DVHFormatError(f"line {lineno}: {exc}") from None
        if np.any(vals < 0) or np.any(vals > 1) or np.any(np.diff(vals) > 1e-12):
            raise DVHFormatError(f"line {lineno}: fractions must lie in [0,1] and not increase")
        curves[row[0]] = vals
        volumes[row[0]] = vol
    return edges, curves, volumes


def _dvh_dose_at(edges, curve, fraction):
    # highest edge still covering the requested volume fraction
    reached = np.flatnonzero(curve >= fraction - 1e-12)
    return float(edges[reached[-1]]) if reached.size else 0.0


def _dvh_volume_at(edges, curve, dose_gy):
    return float(np.interp(dose_gy, edges, curve, right=0.0))


def metric_from_dvh(spec: MetricSpec, edges, curves, volumes, prescription_gy) -> float:
    """Estimate a metric from cumulative DVHs (staircase reading, one-bin resolution)."""
    curve = curves[spec.structure]
    kind = spec.kind
    if kind == "Vrel":
        return _dvh_volume_at(edges, curve, spec.arg * prescription_gy)
    if kind == "Vcc":
        return _dvh_volume_at(edges, curve, spec.arg) * volumes[spec.structure]
    if kind == "Dmax":
        hit = np.flatnonzero(curve > 0)
        return float(edges[hit[-1]]) if hit.size else 0.0
    if kind == "Dq":
        return _dvh_dose_at(edges, curve, spec.arg / 100.0)
    if kind == "Dmean":
        return float(np.sum(np.diff(edges) * curve[1:]))
    if kind == "HI":
        d50 = _dvh_dose_at(edges, curve, 0.5)
        if d50 <= 0:
            return 0.0
        return (_dvh_dose_at(edges, curve, 0.02) - _dvh_dose_at(edges, curve, 0.98)) / d50
    if kind == "CI":
        if BODY not in curves:
            raise DVHFormatError("CI needs a BODY row (whole-grid DVH) in the DVH file")
        piv = _dvh_volume_at(edges, curves[BODY], 0.95 * prescription_gy) * volumes[BODY]
        if piv <= 0:
            return 0.0
        tv = volumes[spec.structure]
        tv_piv = _dvh_volume_at(edges, curve, 0.95 * prescription_gy) * tv
        return tv_piv**2 / (tv * piv)
    raise ValueError(f"unknown metric kind {kind!r}")


def score_dvh_csv(text: str, prescription_gy: float = 60.0) -> ScoreBreakdown:
    edges, curves, volumes = read_dvh_csv(text)
    criteria = criteria_for(curves)
    values = [metric_from_dvh(c.metric, edges, curves, volumes, prescription_gy) for c in criteria]
    if any(math.isnan(v) for v in values):
        raise DVHFormatError("volume_cc is required for absolute-volume metrics")
    return score_values(criteria, values)
