import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otfwi.analysis import (
    correlated_noise,
    dilation_moments,
    landscape_gaussian,
    landscape_shift,
    local_minima,
    noise_reference_signal,
    noise_scaling,
    residual_spectrum,
    InversionRun,
    sampled_hessians,
    spectra_table,
    thickness_study,
    translation_dilation_eigenvalues,
    tune_noise_amplitude,
    two_ricker_signal,
)
from otfwi.scenarios import scenario_three_layer
from otfwi.wave import ShotRecord, TimeAxis, Trace, ricker


def small_three_layer():
    s = scenario_three_layer()
    s.model.nz, s.model.nx, s.model.dz, s.model.dx = 31, 61, 100.0, 100.0
    s.acquisition.n_sources, s.acquisition.n_receivers = 3, 31
    s.acquisition.source_x1 = s.acquisition.receiver_x1 = 6000.0
    s.acquisition.source_x0, s.acquisition.source_depth, s.acquisition.receiver_depth = 1000.0, 100.0, 100.0
    s.acquisition.dt = 0.01
    return s


def test_local_minima_counts_endpoints():
    assert local_minima([3, 1, 2, 0, 5]).tolist() == [1, 3]
    assert local_minima([0, 1, 2]).tolist() == [0]
    assert local_minima([2, 2, 1, 1, 3], strict=False).tolist() == [0, 2, 3]


def test_shift_landscape_zero_and_csv(tmp_path):
    sig = two_ricker_signal(TimeAxis(2401, 1e-3))
    sw = landscape_shift(sig, np.linspace(-0.3, 0.3, 13), tags=("l2", "w1d", "j3"))
    for tag in ("l2", "w1d", "j3"):
        assert sw.values[tag][6] == 0
    p = sw.to_csv(tmp_path / "shift.csv")
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["shift", "l2", "w1d", "j3"]
    assert len(rows) == 14
    again = landscape_shift(sig, np.linspace(-0.3, 0.3, 13), tags=("l2", "w1d", "j3"))
    assert all(np.array_equal(again.values[t], sw.values[t]) for t in sw.values)
    with pytest.raises(ValueError):
        landscape_shift(sig, [2.0])


def test_gaussian_landscape_cross_sections():
    mus = np.linspace(-2, 2, 5)
    sig = np.array([0.5, 1.0, 2.0])
    v = landscape_gaussian(mus, sig).values["w2"]
    np.testing.assert_allclose(v[:, 1], mus**2, atol=1e-4)
    np.testing.assert_allclose(v[2], (sig - 1) ** 2, atol=1e-4)
    assert v[2, 1] <= 1e-6
    H = sampled_hessians(landscape_gaussian(np.linspace(-1, 1, 5), np.linspace(0.5, 1.5, 5)))
    assert np.linalg.eigvalsh(H).min() >= -1e-6


def test_translation_dilation_eigenvalues():
    a, b = dilation_moments()
    assert a == pytest.approx(1.0, abs=1e-6) and abs(b) < 1e-8
    lo, hi = translation_dilation_eigenvalues(a, b)
    assert lo >= 0 and hi >= lo
    # the closed form is the spectrum of [[1, b], [b, a]]
    for aa, bb in ((2.0, 0.3), (0.5, -0.6)):
        np.testing.assert_allclose(sorted(translation_dilation_eigenvalues(aa, bb)),
                                   np.linalg.eigvalsh([[1, bb], [bb, aa]]), atol=1e-12)


def test_noise_study_reproducible_and_zero_amplitude(tmp_path):
    f = noise_reference_signal()
    a = noise_scaling(f, [10, 40], trials=3, seed=7)
    b = noise_scaling(f, [10, 40], trials=3, seed=7)
    assert np.array_equal(a.values, b.values)
    assert np.all(noise_scaling(f, [10, 40], trials=2, amplitude=0.0).values == 0)
    rows = list(csv.reader(open(a.to_csv(tmp_path / "n.csv"))))
    assert rows[0] == ["pieces", "w2"]
    with pytest.raises(ValueError):
        noise_scaling(f, [40, 10])


def test_correlated_noise():
    ax = TimeAxis(400, 0.004)
    g = ShotRecord(np.stack([ricker(8, d, ax).values for d in (0.3, 0.5, 0.7)]), ax)
    same, snr = correlated_noise(g, 0.0)
    assert np.array_equal(same.data, g.data) and snr == float("inf")
    zero = ShotRecord(np.zeros((2, 50)), TimeAxis(50, 0.01))
    noisy, _ = correlated_noise(zero, 0.1, seed=1)
    assert np.isfinite(noisy.data).all() and noisy.data.any()
    amp, snr = tune_noise_amplitude(g, 5.98, seed=3)
    assert abs(snr - 5.98) <= 0.3
    assert abs(correlated_noise(g, amp, seed=3)[1] - snr) < 1e-12


def test_residual_spectrum_examples():
    ax = TimeAxis(1000, 0.002)
    g = ShotRecord(np.zeros((2, 1000)), ax)
    assert not residual_spectrum(g, g).energy.any()
    sine = ShotRecord(np.tile(np.sin(2 * np.pi * 5 * ax.t), (2, 1)), ax)
    sp = residual_spectrum(sine, g)
    assert sp.freqs[np.argmax(sp.amplitude)] == pytest.approx(5.0)
    assert sp.band_fraction(4.0, 6.0) > 0.99


def test_spectra_table_normalizations():
    ax = TimeAxis(1000, 0.002)
    zero = ShotRecord(np.zeros((1, 1000)), ax)
    lo = np.sin(2 * np.pi * 2 * ax.t)
    hi = np.sin(2 * np.pi * 10 * ax.t)
    spectra = {1: residual_spectrum(ShotRecord((lo + hi)[None], ax), zero),
               51: residual_spectrum(ShotRecord((0.5 * hi)[None], ax), zero)}
    run = InversionRun("x", None, spectra)
    own = spectra_table([run], lo=4.0)
    assert own[1][2:] == pytest.approx((0.0, 1.0), abs=1e-3)
    init = spectra_table([run], lo=4.0, relative_to="initial")
    # at the first checkpoint both bands hold half the energy; later only a quarter of the high band remains
    assert init[0][2:] == pytest.approx((0.5, 0.5), abs=1e-3)
    assert init[1][2:] == pytest.approx((0.0, 0.125), abs=1e-3)
    with pytest.raises(ValueError):
        spectra_table([run], relative_to="peak")


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 64)), elements=st.floats(-10, 10)))
def test_parseval(r):
    ax = TimeAxis(r.shape[1], 0.01)
    sp = residual_spectrum(ShotRecord(r, ax), ShotRecord(np.zeros_like(r), ax))
    assert sp.energy.sum() == pytest.approx(sp.time_energy, rel=1e-8, abs=1e-12)


def test_thickness_study_small():
    s = small_three_layer()
    st_ = thickness_study(s, [0.5, 1.5], reference=2.0)
    assert st_.linf[0] > st_.linf[1] > 0
    assert np.all(st_.pre_linf <= 1e-10)
    same = thickness_study(s, [2.0], reference=2.0)
    assert same.linf[0] == 0
