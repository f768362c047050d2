import numpy as np
import pytest

from planforge.phantom import (CTV, HNC_STRUCTURES, BeamConfig, GridSpec, PhantomError, StructureSet,
                               dose, generate_case, load_case, render_ascii, save_case)


def test_hnc_case_has_all_structures(hnc_case):
    assert hnc_case.structures.names == HNC_STRUCTURES
    assert hnc_case.structures.names[0] == CTV
    assert len(HNC_STRUCTURES) == 19
    assert all(m.any() for m in hnc_case.structures.masks)


def test_ctv_never_contains_an_oar(hnc_case):
    m = hnc_case.structures.masks
    assert not (m[0] & m[1:].any(axis=0)).any()


def test_influence_shape_and_sign(hnc_case):
    I = hnc_case.influence
    assert I.shape == (64 * 64, 64)
    assert np.all(I >= 0)
    assert np.all(I.any(axis=0))


def test_unit_fluence_gives_prescription_mean_in_ctv(hnc_case):
    d = dose(hnc_case.influence, np.ones(hnc_case.n_beamlets))
    ctv = hnc_case.structures.flat(CTV)
    assert d[ctv].mean() == pytest.approx(60.0, rel=1e-12)


def test_generation_is_deterministic():
    a = generate_case(5, GridSpec(32, 32), "tiny", BeamConfig(beamlets_per_field=8))
    b = generate_case(5, GridSpec(32, 32), "tiny", BeamConfig(beamlets_per_field=8))
    c = generate_case(6, GridSpec(32, 32), "tiny", BeamConfig(beamlets_per_field=8))
    assert np.array_equal(a.influence, b.influence)
    assert np.array_equal(a.structures.masks, b.structures.masks)
    assert not np.array_equal(a.structures.masks, c.structures.masks)


def test_save_load_roundtrip_is_exact(tmp_path, tiny_case):
    path = save_case(tiny_case, tmp_path)
    back = load_case(path)
    assert back.id == tiny_case.id
    assert back.grid == tiny_case.grid and back.beams == tiny_case.beams
    assert np.array_equal(back.influence, tiny_case.influence)
    assert np.array_equal(back.structures.masks, tiny_case.structures.masks)
    assert back.structures.names == tiny_case.structures.names


def test_save_is_byte_stable(tmp_path, tiny_case):
    p1 = save_case(tiny_case, tmp_path / "a")
    p2 = save_case(tiny_case, tmp_path / "b")
    assert p1.read_bytes() == p2.read_bytes()


def test_zero_fluence_gives_zero_dose(tiny_case):
    assert not dose(tiny_case.influence, np.zeros(tiny_case.n_beamlets)).any()


def test_dose_rejects_negative_and_misshaped_fluence(tiny_case):
    with pytest.raises(ValueError):
        dose(tiny_case.influence, -np.ones(tiny_case.n_beamlets))
    with pytest.raises(ValueError):
        dose(tiny_case.influence, np.ones(3))


def test_grid_below_minimum_rejected():
    with pytest.raises(PhantomError):
        GridSpec(8, 8)


def test_unknown_template_rejected():
    with pytest.raises(PhantomError):
        generate_case(1, GridSpec(32, 32), "pelvis")


def test_structure_set_requires_ctv_first_and_nonempty_masks():
    masks = np.ones((2, 4, 4), bool)
    with pytest.raises(PhantomError):
        StructureSet(("SpinalCord", "CTV"), masks)
    masks[1] = False
    with pytest.raises(PhantomError):
        StructureSet(("CTV", "SpinalCord"), masks)


def test_load_rejects_foreign_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"hello": 1}')
    with pytest.raises(PhantomError):
        load_case(p)


def test_ascii_render_marks_every_structure(tiny_case):
    text = render_ascii(tiny_case.structures)
    assert "#" in text and "a" in text
