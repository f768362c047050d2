import numpy as np
import pytest

from oracles import INCREASING, SCORING_TABLE, close, max_total
from planforge.phantom import CTV, GridSpec, StructureSet
from planforge.plan_eval import (CRITERIA, MAX_SCORE, N_BINS, DVHFormatError, MetricSpec, compute_dvh,
                                 conformity_index, criteria_for, dose_at_volume, dvh_edges, dvh_to_csv,
                                 evaluate_dose, homogeneity_index, max_score, metric, read_dvh_csv,
                                 reward, score_dvh_csv, score_metric)


def test_table_has_25_rows_matching_the_reference_labels():
    assert len(CRITERIA) == 25
    assert [c.metric.label for c in CRITERIA] == list(SCORING_TABLE)


@pytest.mark.parametrize("label", list(SCORING_TABLE))
def test_row_matches_reference_at_breakpoints(label):
    ref, knee, limit = SCORING_TABLE[label]
    for v in (0.0, knee, limit, limit * 1.5, -1.0, knee / 2, (knee + limit) / 2):
        assert close(score_metric(label, v), ref(v)), v


@pytest.mark.parametrize("label", list(SCORING_TABLE))
def test_row_is_continuous_at_breakpoints(label):
    crit = next(c for c in CRITERIA if c.metric.label == label)
    for b in crit.breakpoints[1:]:
        assert abs(crit.score(b * (1 + 1e-12)) - crit.score(b)) < 1e-8
    assert abs(crit.score(1e-15) - crit.score(0.0)) < 1e-8


@pytest.mark.parametrize("label", list(SCORING_TABLE))
def test_row_is_monotone(label):
    crit = next(c for c in CRITERIA if c.metric.label == label)
    v = np.linspace(-0.1 * crit.limit, 1.2 * crit.limit, 1000)
    s = np.array([crit.score(x) for x in v])
    steps = np.diff(s)
    if label in INCREASING:
        assert np.all(steps >= -1e-12)
    else:
        assert np.all(steps <= 1e-12)


def test_known_values():
    assert score_metric("BrainStem Dmax", 45) == pytest.approx(6.0)
    assert score_metric("CTV V95%", 0.98) == pytest.approx(12.0)
    assert score_metric("Parotid_R Dmean", 26) == 0.0


def test_maximum_total_matches_independent_sum():
    assert float(max_total()) == pytest.approx(204.4, abs=1e-12)
    assert MAX_SCORE == pytest.approx(float(max_total()), abs=1e-12)
    assert max_score() == MAX_SCORE


def test_subset_maximum_is_sum_of_present_rows():
    crit = criteria_for(["CTV", "SpinalCord"])
    assert len(crit) == 5
    assert max_score(crit) == pytest.approx(float(max_total([c.metric.label for c in crit])))


def test_reward_is_absolute_and_centered():
    assert reward(102.2) == 0.0
    r1, r2 = reward(50) - reward(40), reward(60) - reward(50)
    assert r1 > 0 and r2 > 0


def test_dvh_edges():
    e = dvh_edges(60.0)
    assert e.shape == (N_BINS,)
    assert e[0] == 0 and e[1] == pytest.approx(0.6)


def _toy():
    masks = np.zeros((2, 4, 4), bool)
    masks[0, :2] = True
    masks[1, 2:] = True
    return StructureSet(("CTV", "SpinalCord"), masks)


def test_dvh_of_uniform_dose_is_a_step():
    s = _toy()
    d = np.full(16, 30.0)
    dvh = compute_dvh(d, s, 60.0)
    e = dvh_edges(60.0)
    assert np.all(dvh[:, e <= 30.0] == 1.0)
    assert np.all(dvh[:, e > 30.0] == 0.0)


def test_dvh_is_nonincreasing_and_starts_at_one(tiny_case):
    rng = np.random.default_rng(0)
    d = tiny_case.influence @ rng.uniform(0, 2, tiny_case.n_beamlets)
    dvh = compute_dvh(d, tiny_case.structures, 60.0)
    assert np.all(dvh[:, 0] == 1.0)
    assert np.all(np.diff(dvh, axis=1) <= 0)


def test_dose_at_volume_and_indices():
    doses = np.arange(1, 101, dtype=float)
    assert dose_at_volume(doses, 0) == 100
    assert dose_at_volume(doses, 100) == 1
    assert homogeneity_index(np.full(10, 60.0)) == 0.0
    assert homogeneity_index(np.zeros(10)) == 0.0
    target = np.zeros(16, bool)
    target[:8] = True
    d = np.where(target, 60.0, 0.0)
    assert conformity_index(d, target, 60.0) == pytest.approx(1.0)
    d[8:] = 60.0
    assert conformity_index(d, target, 60.0) == pytest.approx(0.5)


def test_metric_kinds():
    s = _toy()
    g = GridSpec(16, 16)
    d = np.concatenate([np.full(8, 60.0), np.linspace(0, 45, 8)])
    assert metric(d, s, MetricSpec("SpinalCord", "Dmax"), g, 60.0) == 45
    assert metric(d, s, MetricSpec("SpinalCord", "Dmean"), g, 60.0) == pytest.approx(22.5)
    assert metric(d, s, MetricSpec(CTV, "Vrel", 0.95), g, 60.0) == 1.0
    assert metric(d, s, MetricSpec("SpinalCord", "Vcc", 40), g, 60.0) == pytest.approx(g.voxel_volume_cc)


def test_evaluate_dose_breakdown(tiny_case):
    bd = evaluate_dose(np.zeros(tiny_case.influence.shape[0]), tiny_case)
    assert bd.labels == ("CTV V95%", "CTV V105%", "CTV CI", "CTV HI", "SpinalCord Dmax")
    assert bd.max_total == pytest.approx(114.4)
    assert bd.total == pytest.approx(-40 + 20 + 0 + 20 + 14.4)
    header = bd.to_csv().splitlines()[0]
    assert header == "metric,value,score,max_score,organ"


def _best_dvh_text():
    """A DVH in which every metric sits at its best value."""
    from planforge.phantom import HNC_STRUCTURES
    edges = dvh_edges(60.0)
    rows = {}
    for name in HNC_STRUCTURES:
        rows[name] = (edges <= 60.0).astype(float) if name == CTV else (edges <= 0).astype(float)
    rows["BODY"] = rows[CTV]
    vols = {n: 10.0 for n in rows}
    return dvh_to_csv(np.array(list(rows.values())), list(rows), 60.0, list(vols.values()))


def test_score_best_dvh_gives_maximum():
    bd = score_dvh_csv(_best_dvh_text(), 60.0)
    assert bd.total == pytest.approx(204.4, abs=1e-9)


def test_score_zero_dose_dvh_gives_104_4():
    from planforge.phantom import HNC_STRUCTURES
    edges = dvh_edges(60.0)
    names = list(HNC_STRUCTURES) + ["BODY"]
    dvh = np.tile((edges <= 0).astype(float), (len(names), 1))
    bd = score_dvh_csv(dvh_to_csv(dvh, names, 60.0, [10.0] * len(names)), 60.0)
    assert bd.total == pytest.approx(104.4, abs=1e-9)


def test_malformed_dvh_reports_line_number():
    text = _best_dvh_text().splitlines()
    text[3] = text[3].replace(",", ";", 3)
    with pytest.raises(DVHFormatError, match="line 4"):
        read_dvh_csv("\n".join(text))
