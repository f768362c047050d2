"""Independent reference implementations used by the tests.

The scoring rows are transcribed by hand as explicit piecewise formulas, a
different representation from the coefficient table in ``plan_eval``, so a
typo in one does not silently agree with the other.
"""
from __future__ import annotations

import math
from fractions import Fraction


def _pw(low, f1, k, f2, lim, high):
    def score(v):
        if v <= 0:
            return low
        if v <= k:
            return f1(v)
        if v <= lim:
            return f2(v)
        return high
    return score


# label -> (score function, knee, limit)
SCORING_TABLE = {
    "CTV V95%": (_pw(-40, lambda v: -40 + 52 / 0.98 * v, 0.98, lambda v: 12 + 28 / 0.02 * (v - 0.98), 1, 40), 0.98, 1),
    "CTV V105%": (_pw(20, lambda v: 20 - 14 / 0.1 * v, 0.1, lambda v: 6 - 6 / 0.9 * (v - 0.1), 1, 0), 0.1, 1),
    "CTV CI": (_pw(0, lambda v: 6 / 0.6 * v, 0.6, lambda v: 6 + 14 / 0.4 * (v - 0.6), 1, 20), 0.6, 1),
    "CTV HI": (_pw(20, lambda v: 20 - 14 / 0.1 * v, 0.1, lambda v: 6 - 6 / 0.9 * (v - 0.1), 1, 0), 0.1, 1),
    "BrainStem Dmax": (_pw(7.2, lambda v: 7.2 - 1.2 / 45 * v, 45, lambda v: 6 - 6 / 9 * (v - 45), 54, 0), 45, 54),
    "BrainStem D1%": (_pw(7.2, lambda v: 7.2 - 1.2 / 38.5 * v, 38.5, lambda v: 6 - 6 / 11.5 * (v - 38.5), 50, 0), 38.5, 50),
    "SpinalCord Dmax": (_pw(14.4, lambda v: 14.4 - 2.4 / 30 * v, 30, lambda v: 12 - 12 / 10 * (v - 30), 40, 0), 30, 40),
    "OpticChiasm D20%": (_pw(14.4, lambda v: 14.4 - 2.4 / 30 * v, 30, lambda v: 12 - 12 / 10 * (v - 30), 40, 0), 30, 40),
    "Opt_R D20%": (_pw(7.2, lambda v: 7.2 - 1.2 / 30 * v, 30, lambda v: 6 - 6 / 10 * (v - 30), 40, 0), 30, 40),
    "Opt_L D20%": (_pw(7.2, lambda v: 7.2 - 1.2 / 30 * v, 30, lambda v: 6 - 6 / 10 * (v - 30), 40, 0), 30, 40),
    "TemporalLobe_R V40cc": (_pw(3.6, lambda v: 3.6 - 0.6 / 7.66 * v, 7.66, lambda v: 3 - 3 / 2.34 * (v - 7.66), 10, 0), 7.66, 10),
    "TemporalLobe_R V50cc": (_pw(3.6, lambda v: 3.6 - 0.6 / 4.66 * v, 4.66, lambda v: 3 - 3 / 1.34 * (v - 4.66), 6, 0), 4.66, 6),
    "TemporalLobe_L V40cc": (_pw(3.6, lambda v: 3.6 - 0.6 / 7.66 * v, 7.66, lambda v: 3 - 3 / 2.34 * (v - 7.66), 10, 0), 7.66, 10),
    "TemporalLobe_L V50cc": (_pw(3.6, lambda v: 3.6 - 0.6 / 4.66 * v, 4.66, lambda v: 3 - 3 / 1.34 * (v - 4.66), 6, 0), 4.66, 6),
    "Mandible Dmean": (_pw(6, lambda v: 6 - 1 / 30 * v, 30, lambda v: 5 - 5 / 10 * (v - 30), 40, 0), 30, 40),
    "TMJ_R Dmean": (_pw(3, lambda v: 3 - 0.5 / 30 * v, 30, lambda v: 2.5 - 2.5 / 10 * (v - 30), 40, 0), 30, 40),
    "TMJ_L Dmean": (_pw(3, lambda v: 3 - 0.5 / 30 * v, 30, lambda v: 2.5 - 2.5 / 10 * (v - 30), 40, 0), 30, 40),
    "Parotid_R Dmean": (_pw(3, lambda v: 3 - 0.5 / 21 * v, 21, lambda v: 2.5 - 2.5 / 4 * (v - 21), 25, 0), 21, 25),
    "Parotid_L Dmean": (_pw(3, lambda v: 3 - 0.5 / 21 * v, 21, lambda v: 2.5 - 2.5 / 4 * (v - 21), 25, 0), 21, 25),
    "Lens_R D1%": (_pw(3, lambda v: 3 - 0.5 / 6 * v, 6, lambda v: 2.5 - 2.5 / 4 * (v - 6), 10, 0), 6, 10),
    "Lens_L D1%": (_pw(3, lambda v: 3 - 0.5 / 6 * v, 6, lambda v: 2.5 - 2.5 / 4 * (v - 6), 10, 0), 6, 10),
    "Eye_R Dmean": (_pw(1.8, lambda v: 1.8 - 0.3 / 30 * v, 30, lambda v: 1.5 - 1.5 / 10 * (v - 30), 40, 0), 30, 40),
    "Eye_L Dmean": (_pw(1.8, lambda v: 1.8 - 0.3 / 30 * v, 30, lambda v: 1.5 - 1.5 / 10 * (v - 30), 40, 0), 30, 40),
    "InnerEar_R Dmean": (_pw(2.4, lambda v: 2.4 - 0.4 / 30 * v, 30, lambda v: 2 - 2 / 10 * (v - 30), 40, 0), 30, 40),
    "InnerEar_L Dmean": (_pw(2.4, lambda v: 2.4 - 0.4 / 30 * v, 30, lambda v: 2 - 2 / 10 * (v - 30), 40, 0), 30, 40),
}

# Rows whose score rises with the metric value (all others fall).
INCREASING = {"CTV V95%", "CTV CI"}


def row_maximum(label: str) -> Fraction:
    """Largest score of a row, from the pieces evaluated at their ends in exact arithmetic.

    Every row is piecewise linear, so the maximum is attained at v <= 0, at a
    breakpoint, or past the limit.
    """
    fn, knee, limit = SCORING_TABLE[label]
    candidates = [fn(-1.0), fn(knee), fn(limit), fn(limit + 1.0)]
    return max(Fraction(c).limit_denominator(1000) for c in candidates)


def max_total(labels=None) -> Fraction:
    labels = SCORING_TABLE if labels is None else labels
    return sum((row_maximum(l) for l in labels), Fraction(0))


def epsilon_reference(e: int) -> Fraction:
    """0.9 * 0.9**floor(e/5) as an exact rational."""
    return Fraction(9, 10) * Fraction(9, 10) ** (e // 5)


def close(a, b, tol=1e-9) -> bool:
    return math.isclose(a, b, rel_tol=0, abs_tol=tol)
