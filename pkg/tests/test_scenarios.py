import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otfwi.gridio import write_grid
from otfwi.scenarios import (
    PRESETS,
    Scenario,
    ScenarioError,
    build_layered,
    load_model_file,
    scenario_bp_like,
    scenario_marmousi_like,
    scenario_three_layer,
    smooth_model,
    snap_interface,
    two_way_time,
)
from otfwi.wave import Grid2D, VelocityModel


def test_build_layered_examples():
    g = Grid2D(41, 7, 50.0, 50.0)
    assert np.all(build_layered([], [2.5], g).c == 2.5)
    m = build_layered([700.0, 1300.0], [2.0, 4.0, 2.0], g)
    assert np.all(m.c == m.c[:, :1])
    col = m.c[:, 0]
    assert np.all(col[g.z < 700] == 2.0) and np.all(col[(g.z > 730) & (g.z < 1300)] == 4.0)
    assert np.all(col[g.z > 1330] == 2.0)
    with pytest.raises(ScenarioError):
        build_layered([1000.0, 900.0], [1, 2, 3], g)
    with pytest.raises(ScenarioError):
        build_layered([5000.0], [1, 2], g)
    with pytest.raises(ScenarioError):
        build_layered([500.0], [1, 2, 3], g)


@settings(max_examples=50, deadline=None)
@given(st.floats(30.0, 1970.0))
def test_snap_within_half_cell(depth):
    g = Grid2D(41, 3, 50.0, 50.0)
    assert abs(snap_interface(depth, g) - depth) <= 25.0 + 1e-9
    m = build_layered([depth], [1.0, 2.0], g)
    assert np.all(m.c[g.z < snap_interface(depth, g), 0] == 1.0)


def test_smooth_model():
    g = Grid2D(30, 40, 20.0, 20.0)
    m = build_layered([300.0], [2.0, 3.0], g)
    assert np.array_equal(smooth_model(m, 0).c, m.c)
    h = VelocityModel(g, np.full(g.shape, 2.2))
    np.testing.assert_allclose(smooth_model(h, 100).c, 2.2)
    assert smooth_model(m, 100).c.mean() == pytest.approx(m.c.mean(), rel=1e-3)
    with pytest.raises(ScenarioError):
        smooth_model(m, -1)


def test_three_layer_preset():
    s = scenario_three_layer()
    truth, initial, acq = s.build()
    a = s.acquisition
    assert a.record_length >= two_way_time(s.model.depths, s.model.velocities, a.source_depth)
    differ = np.any(truth.c != initial.c, axis=1)
    assert np.all(s.grid.z[differ] > snap_interface(s.model.depths[1], s.grid))
    mask = s.update_mask()
    assert not mask[s.grid.z < 1000].any() and mask[s.grid.z > 1000].all()
    full = scenario_three_layer(full_scale=True)
    assert (full.acquisition.n_sources, full.acquisition.n_receivers, full.acquisition.record_length) == (52, 301, 3.8)
    full.validate()


def test_bp_like_preset_builds():
    s = scenario_bp_like()
    truth, initial, acq = s.build()
    assert truth.c.max() > initial.c.max()
    assert len(acq.sources) == 6 and len(acq.receivers) == s.model.nx


def test_validation_failures():
    s = scenario_three_layer()
    s.acquisition.dt = 0.02
    with pytest.raises(ScenarioError, match="dt"):
        s.validate()
    s = scenario_three_layer()
    s.acquisition.record_length = 1.0
    with pytest.raises(ScenarioError, match="record_length"):
        s.validate()
    s = scenario_three_layer()
    s.acquisition.receiver_x1 = 1e6
    with pytest.raises(Exception):
        s.validate()


def test_text_round_trip_and_unknown_keys(tmp_path):
    for make in PRESETS.values():
        s = make()
        assert Scenario.from_text(s.to_text()) == s
    p = scenario_three_layer().save(tmp_path / "s.ini")
    assert Scenario.load(p) == scenario_three_layer()
    with pytest.raises(ScenarioError, match="unknown key"):
        Scenario.from_text("[model]\nnz = 3\ncolour = red\n")
    with pytest.raises(ScenarioError, match="unknown section"):
        Scenario.from_text("[extras]\na = 1\n")
    with pytest.raises(ScenarioError, match="bad value"):
        Scenario.from_text("[model]\nnz = many\n")
    with pytest.raises(ScenarioError, match="not found"):
        Scenario.load(tmp_path / "missing.ini")


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 500), st.floats(1.0, 100.0), st.lists(st.floats(0.5, 9.0), min_size=1, max_size=4),
       st.sampled_from(["l2", "w1d", "w2d", "j3"]), st.integers(0, 2**31 - 1))
def test_round_trip_property(nz, dz, vels, misfit, seed):
    s = Scenario("prop")
    s.model.nz, s.model.dz, s.model.velocities = nz, dz, vels
    s.inversion.misfit = misfit
    s.output.seed = seed
    assert Scenario.from_text(s.to_text()) == s


def test_model_file_with_sidecar(tmp_path):
    c = np.full((51, 154), 2500.0)
    write_grid(tmp_path / "vel.bin", c)
    s = scenario_marmousi_like(str(tmp_path / "vel.bin"))
    with pytest.raises(ScenarioError, match="sidecar"):
        s.models()
    (tmp_path / "vel.bin.txt").write_text("dz = 20\ndx = 20\nunits = m/s\n")
    m = load_model_file(tmp_path / "vel.bin")
    assert m.c.max() == 2.5 and m.grid.dz == 20.0
    truth, initial, acq = s.build()
    assert truth.grid.shape == (51, 154)
    (tmp_path / "vel.bin.txt").write_text("dz = 20\ndx = 20\nunits = furlongs\n")
    with pytest.raises(ScenarioError, match="units"):
        load_model_file(tmp_path / "vel.bin")
