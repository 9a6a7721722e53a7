import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import short_pulse, small_params
from pesc.device import preset
from pesc.evaluation import PointResult
from pesc.flux import FluxPulse
from pesc.spectrum import (
    DRIVE_INDUCED,
    CalibrationError,
    PESpectrum,
    calibrate_gate,
    calibrated_pulse,
    compare,
    detect_peaks,
    frequency_grid,
    gate_error,
    sweep,
)

DT = 0.05


def spectrum(w, values, resonances=()):
    n = len(w)
    return PESpectrum(w, values, values, np.zeros(n), np.zeros((n, 2)), [""] * n, list(resonances))


def test_frequency_grid():
    g = frequency_grid(5.45, 5.70, 0.005)
    assert len(g) == 51
    assert g[0] == 5.45 and g[-1] == 5.70
    assert frequency_grid(4.0, 4.0, 0.1).tolist() == [4.0]
    with pytest.raises(ValueError):
        frequency_grid(5.0, 4.0, 0.1)
    with pytest.raises(ValueError):
        frequency_grid(4.0, 5.0, 0.0)


def test_no_peaks_in_monotone_spectrum():
    w = np.linspace(4.0, 5.0, 21)
    assert detect_peaks(spectrum(w, np.logspace(-6, -1, 21))) == []


def test_triangle_peak_matches_resonance():
    w = np.round(np.linspace(5.50, 5.60, 21), 9)
    v = 10.0 ** (-4 + 3 * (1 - np.abs(np.arange(21) - 13) / 13))
    peaks = detect_peaks(spectrum(w, v, [(5.6559, "far"), (5.5659, "w3 = w1-a1")]))
    assert len(peaks) == 1
    p = peaks[0]
    assert p.omega3_ghz == pytest.approx(5.565)
    assert p.label == "w3 = w1-a1" and p.resonance_ghz == 5.5659
    # rises 3 decades from the left edge, falls about 1.6 to the right edge
    assert p.prominence_decades == pytest.approx(3 * 7 / 13, abs=1e-9)


def test_unmatched_peak_is_drive_induced():
    w = np.round(np.linspace(4.40, 4.55, 31), 9)
    v = np.full(31, 1e-5)
    v[10] = 1e-2
    v[22] = 1e-5 * 5  # too small to count
    peaks = detect_peaks(spectrum(w, v, [(4.30, "x")]))
    assert [p.omega3_ghz for p in peaks] == [w[10]]
    assert peaks[0].label == DRIVE_INDUCED and peaks[0].drive_induced


def test_two_separated_peaks():
    w = np.round(np.linspace(4.0, 5.0, 101), 9)
    v = 1e-6 + 1e-2 * np.exp(-((w - 4.3) / 0.01) ** 2) + 1e-3 * np.exp(-((w - 4.7) / 0.01) ** 2)
    peaks = detect_peaks(spectrum(w, v))
    np.testing.assert_allclose([p.omega3_ghz for p in peaks], [4.3, 4.7])
    assert peaks[0].height > peaks[1].height


@given(a=st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5),
       b=st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5))
def test_compare_is_pointwise_minimum(a, b):
    w = np.linspace(4.0, 4.4, 5)
    merged, table = compare(spectrum(w, np.array(a)), spectrum(w, np.array(b)))
    np.testing.assert_array_equal(merged.clamped, np.minimum(a, b))
    for row in table:
        assert row["improvement"] >= 1.0


def test_compare_requires_equal_grids():
    with pytest.raises(ValueError):
        compare(spectrum([4.0, 4.1], np.ones(2)), spectrum([4.0, 4.2], np.ones(2)))


def test_spectrum_validation():
    with pytest.raises(ValueError):
        spectrum([4.1, 4.0], np.ones(2))
    with pytest.raises(ValueError):
        spectrum([4.0, 4.1], np.array([0.1, -0.1]))


def test_csv_round_trip_is_byte_identical(tmp_path):
    pts = [PointResult(4.4 + 0.005 * i, 10.0 ** -i, 0.1 - i, 3.25 * i, (1e-3, 2e-3), "" if i else "leakage")
           for i in range(4)]
    spec = PESpectrum.from_points(pts)
    spec.to_csv(tmp_path / "a.csv")
    PESpectrum.from_csv(tmp_path / "a.csv").to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    (tmp_path / "c.csv").write_text("x,y\n1,2\n")
    with pytest.raises(ValueError):
        PESpectrum.from_csv(tmp_path / "c.csv")


@pytest.fixture(scope="module")
def small_sweep():
    return sweep(small_params(), short_pulse(), [4.40, 4.42, 4.44, 4.46], dt=DT)


def test_decoupled_spectator_gives_flat_spectrum():
    params = small_params().decoupled_spectator()
    spec = sweep(params, short_pulse(), [4.0, 4.3, 4.9, 5.3], dt=DT)
    assert np.ptp(spec.clamped) < 1e-10
    assert spec.peaks == []


def test_sweep_is_independent_of_workers_and_subgrids(small_sweep, tmp_path):
    par = sweep(small_params(), short_pulse(), small_sweep.omega3_ghz, workers=2, dt=DT)
    np.testing.assert_array_equal(par.clamped, small_sweep.clamped)
    part = sweep(small_params(), short_pulse(), small_sweep.omega3_ghz[1:3], dt=DT)
    np.testing.assert_array_equal(part.clamped, small_sweep.clamped[1:3])
    small_sweep.to_csv(tmp_path / "a.csv")
    par.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_resume_reuses_points(small_sweep):
    seen = []
    resumed = sweep(small_params(), short_pulse(), small_sweep.omega3_ghz, dt=DT,
                    resume=small_sweep.points()[:3], on_point=seen.append)
    assert [p.omega3_ghz for p in seen] == [4.46]
    np.testing.assert_array_equal(resumed.clamped, small_sweep.clamped)


def test_sweep_records_metadata_and_band(small_sweep):
    assert small_sweep.metadata["dt_ns"] == DT
    assert np.all(small_sweep.clamped >= 0)
    assert all(f == "" for f in small_sweep.flags)
    with pytest.raises(ValueError):
        sweep(small_params(), short_pulse(), [2.0, 2.5], dt=DT)
    with pytest.raises(ValueError):
        sweep(small_params(), short_pulse(), [4.5, 4.4], dt=DT)


def test_svg_is_deterministic(small_sweep, tmp_path):
    small_sweep.plot_svg(tmp_path / "a.svg", overlays=[("half", small_sweep.clamped / 2)])
    small_sweep.plot_svg(tmp_path / "b.svg", overlays=[("half", small_sweep.clamped / 2)])
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_annotations(small_sweep, tmp_path):
    small_sweep.write_annotations(tmp_path / "a.json")
    data = json.loads((tmp_path / "a.json").read_text())
    assert "static_resonances" in data
    np.testing.assert_allclose(data["eps_avg_mean"], small_sweep.eps_avg.mean(axis=1))


def test_idle_pulse_cannot_be_calibrated():
    idle = FluxPulse.single(theta=-0.108, delta=0.0, omega_phi_mhz=850.6, sigma_t=1.5, T=6.0)
    with pytest.raises(CalibrationError) as err:
        calibrate_gate(small_params(), idle, "sqrt_iswap", T_grid=[5.0, 6.0], refine=(), dt=DT)
    assert len(err.value.trace) == 2


def test_unknown_gate_rejected():
    with pytest.raises(CalibrationError):
        calibrate_gate(small_params(), short_pulse(), "cnot")


@pytest.mark.slow
@pytest.mark.parametrize("gate", ["sqrt_iswap", "cz"])
def test_calibrated_pulses_realize_their_gates(gate):
    eps, _ = gate_error(preset(gate), calibrated_pulse(gate), gate, dt=0.01)
    assert eps < 1e-3
