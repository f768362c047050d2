import json
from fractions import Fraction

import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import SCORING_TABLE
from planforge.config import config_from_dict
from planforge.marl import select_actions
from planforge.neural import DTYPE, HyperMixer
from planforge.phantom import StructureSet
from planforge.plan_eval import CRITERIA, compute_dvh
from planforge.tpp import apply_actions, tuned_value

finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(st.integers(-20, 20), st.fractions(-100, 100), st.fractions(0, 100))
def test_tuned_value_stays_in_bounds(x, lo, width):
    hi = lo + width
    v = tuned_value(Fraction(x), lo, hi)
    assert lo <= v <= hi


@given(arrays(np.int64, 6, elements=st.integers(-5, 5)), arrays(np.int64, 6, elements=st.integers(-1, 1)))
def test_actions_keep_coordinates_on_the_grid(x, a):
    y = apply_actions(x, a)
    assert np.all(np.abs(y) <= 5)
    assert np.all(np.abs(y - x) <= 1)


@given(st.sampled_from(range(len(CRITERIA))), finite)
def test_scores_match_reference_everywhere(row, v):
    c = CRITERIA[row]
    ref = SCORING_TABLE[c.metric.label][0]
    assert abs(c.score(v) - ref(v)) <= 1e-9
    assert c.min_score - 1e-12 <= c.score(v) <= c.max_score + 1e-12


@given(arrays(np.float64, 16, elements=st.floats(0, 120)))
def test_dvh_is_monotone_and_bounded(d):
    masks = np.zeros((2, 4, 4), bool)
    masks[0, :2] = True
    masks[1, 2:] = True
    dvh = compute_dvh(d, StructureSet(("CTV", "SpinalCord"), masks), 60.0)
    assert np.all((dvh >= 0) & (dvh <= 1))
    assert np.all(np.diff(dvh, axis=1) <= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mixer_monotone_for_random_parameters(seed):
    g = torch.Generator().manual_seed(seed)
    mixer = HyperMixer(3, 4, 5)
    with torch.no_grad():
        for p in mixer.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=DTYPE) * 2)
    q = torch.randn(8, 3, generator=g, dtype=DTYPE, requires_grad=True)
    s = torch.randn(8, 4, generator=g, dtype=DTYPE)
    (grad,) = torch.autograd.grad(mixer(q, s).sum(), q)
    assert torch.all(grad >= 0)


@given(st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_select_actions_valid(eps, seed):
    rng = np.random.default_rng(seed)
    a = select_actions(np.random.default_rng(seed + 1).normal(size=(5, 3)), eps, rng)
    assert a.shape == (5,) and set(a.tolist()) <= {0, 1, 2}


@settings(deadline=None)
@given(st.floats(0.01, 0.99), st.integers(1, 12), st.integers(0, 1000), st.booleans())
def test_config_roundtrip(gamma, workers, seed, shared):
    cfg = config_from_dict({"seed": seed, "train": {"gamma": gamma, "workers": workers},
                            "network": {"shared": shared}, "phantom": {"template": "tiny"}})
    assert config_from_dict(json.loads(cfg.to_json())) == cfg
