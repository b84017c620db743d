"""Coordinate transforms, complex phase, and resampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from gfident import signals as sig

TWO_THIRDS_PI = 2.0 * np.pi / 3.0


def balanced_set(amplitude: float, phase: float) -> tuple[float, float, float]:
    """Instantaneous values of a balanced cosine set at t = 0."""
    return (
        amplitude * np.cos(phase),
        amplitude * np.cos(phase - TWO_THIRDS_PI),
        amplitude * np.cos(phase + TWO_THIRDS_PI),
    )


def series_from_voltage(v: np.ndarray, dt: float = 1e-3) -> sig.DqSeries:
    return sig.DqSeries(t0=0.0, dt=dt, v=v, i=np.zeros_like(v))


# ---------------------------------------------------------------------------
# park_transform / inverse_park
# ---------------------------------------------------------------------------


def test_park_aligned_balanced_set_maps_to_unity():
    assert sig.park_transform(balanced_set(1.0, 0.0), 0.0) == pytest.approx(1.0 + 0.0j)


def test_park_zero_signal_maps_to_zero():
    for angle in (0.0, 0.7, -2.0):
        assert sig.park_transform((0.0, 0.0, 0.0), angle) == 0.0


def test_park_amplitude_and_phase_recovered():
    # Balanced set of amplitude 0.95 shifted by 0.1 rad, frame angle 0:
    # evaluating the three cosines and applying the transform matrix by hand
    # gives exactly 0.95*exp(0.1j).
    got = sig.park_transform(balanced_set(0.95, 0.1), 0.0)
    assert_allclose([got.real, got.imag],
                    [0.95 * np.cos(0.1), 0.95 * np.sin(0.1)], atol=1e-12)


def test_park_warns_on_unbalanced_input():
    with pytest.warns(UserWarning, match="unbalanced"):
        sig.park_transform((1.0, 0.0, 0.0), 0.0)


def test_park_rejects_non_finite():
    with pytest.raises(ValueError):
        sig.park_transform((np.nan, 0.0, 0.0), 0.0)


def test_inverse_park_of_unity_is_aligned_cosine_set():
    a, b, c = sig.inverse_park(1.0 + 0.0j, 0.0)
    assert_allclose([a, b, c], [1.0, -0.5, -0.5], atol=1e-12)


def test_inverse_park_of_zero():
    assert sig.inverse_park(0.0j, 1.3) == (0.0, 0.0, 0.0)


def test_park_round_trip_example():
    v = 0.8 * np.exp(0.3j)
    back = sig.park_transform(sig.inverse_park(v, 0.45), 0.45)
    assert abs(back - v) < 1e-12


@settings(max_examples=100, deadline=None)
@given(
    re=st.floats(-2.0, 2.0),
    im=st.floats(-2.0, 2.0),
    angle=st.floats(-10.0, 10.0),
)
def test_park_round_trip_property(re, im, angle):
    v = complex(re, im)
    assert abs(sig.park_transform(sig.inverse_park(v, angle), angle) - v) < 1e-12


@settings(max_examples=50, deadline=None)
@given(angle=st.floats(-6.0, 6.0), delta=st.floats(-6.0, 6.0))
def test_park_rotation_covariance(angle, delta):
    abc = balanced_set(0.9, 0.4)
    shifted = sig.park_transform(abc, angle + delta)
    base = sig.park_transform(abc, angle)
    assert abs(shifted - np.exp(-1j * delta) * base) < 1e-12


# ---------------------------------------------------------------------------
# complex_power
# ---------------------------------------------------------------------------


def test_complex_power_unity():
    s = sig.complex_power(1.0, 1.0)
    assert (s.P, s.Q, s.nu) == (1.0, 0.0, 1.0)


def test_complex_power_arithmetic():
    s = sig.complex_power(1.0, 0.5 - 0.5j)
    assert_allclose([s.P, s.Q, s.nu], [0.5, 0.5, 1.0], atol=1e-15)


def test_complex_power_rotation_invariance():
    for alpha in np.linspace(-np.pi, np.pi, 17):
        rot = np.exp(1j * alpha)
        s = sig.complex_power(rot, rot)
        assert abs(s.P - 1.0) < 1e-12 and abs(s.Q) < 1e-12


# ---------------------------------------------------------------------------
# to_phase / complex_frequency
# ---------------------------------------------------------------------------


def test_to_phase_constant_unity_voltage():
    series = series_from_voltage(np.ones(50, dtype=complex))
    assert_allclose(sig.to_phase(series).theta, 0.0, atol=1e-15)


def test_to_phase_rotating_voltage_unwraps_exactly():
    omega = 2.0 * np.pi * 90.0  # more than half a turn per 10 ms
    dt = 1e-3
    t = dt * np.arange(400)
    series = series_from_voltage(np.exp(1j * omega * t), dt=dt)
    theta = sig.to_phase(series).theta
    assert_allclose(theta.imag, omega * t, atol=1e-9)
    assert np.all(np.diff(theta.imag) > 0.0)
    assert np.max(np.abs(np.diff(theta.imag))) < np.pi


def test_to_phase_log_magnitude():
    series = series_from_voltage(np.full(10, 0.5, dtype=complex))
    assert_allclose(sig.to_phase(series).theta.real, np.log(0.5), atol=1e-15)


def test_to_phase_exp_round_trip():
    rng = np.random.default_rng(3)
    v = np.exp(0.1 * rng.standard_normal(300)
               + 1j * np.cumsum(0.05 * rng.standard_normal(300)))
    series = series_from_voltage(v)
    back = np.exp(sig.to_phase(series).theta)
    assert np.max(np.abs(back - v) / np.abs(v)) < 1e-12


def test_to_phase_rejects_collapsed_voltage():
    v = np.ones(10, dtype=complex)
    v[4] = 1e-9
    with pytest.raises(ValueError, match="voltage magnitude too small"):
        sig.to_phase(series_from_voltage(v))


def test_complex_frequency_exact_on_rotation():
    omega = 2.0 * np.pi * 3.0
    t = 1e-3 * np.arange(100)
    phase = sig.PhaseSeries(t0=0.0, dt=1e-3, theta=1j * omega * t)
    eta = sig.complex_frequency(phase).eta
    assert_allclose(eta, 1j * omega, atol=1e-9)


def test_complex_frequency_exact_on_real_ramp():
    rho = -0.8
    t = 1e-3 * np.arange(64)
    phase = sig.PhaseSeries(t0=0.0, dt=1e-3, theta=rho * t + 0.0j)
    assert_allclose(sig.complex_frequency(phase).eta, rho, atol=1e-12)


def test_complex_frequency_zero_on_constant():
    phase = sig.PhaseSeries(t0=0.0, dt=1e-3, theta=np.full(10, 0.2 + 0.3j))
    assert_allclose(sig.complex_frequency(phase).eta, 0.0, atol=1e-15)


def test_complex_frequency_needs_three_samples():
    phase = sig.PhaseSeries(t0=0.0, dt=1e-3, theta=np.zeros(2, dtype=complex))
    with pytest.raises(ValueError, match="at least 3"):
        sig.complex_frequency(phase)


# ---------------------------------------------------------------------------
# downsample
# ---------------------------------------------------------------------------


def test_downsample_length_and_grid():
    v = np.ones(20_000, dtype=complex)
    series = sig.DqSeries(t0=0.0, dt=5e-5, v=v, i=v.copy())
    out = sig.downsample(series, 1e-3)
    assert len(out) == 1000
    assert out.dt == 1e-3


def test_downsample_identity():
    series = series_from_voltage(np.exp(1j * np.linspace(0, 1, 64)))
    assert sig.downsample(series, series.dt) is series


def test_downsample_tracks_slow_sinusoid():
    dt = 5e-5
    t = dt * np.arange(40_000)
    wave = 1.0 + 0.05 * np.sin(2.0 * np.pi * 10.0 * t)
    series = sig.DqSeries(t0=0.0, dt=dt, v=wave.astype(complex),
                          i=np.zeros_like(t, dtype=complex))
    out = sig.downsample(series, 1e-3)
    kept_t = out.t
    expected = 1.0 + 0.05 * np.sin(2.0 * np.pi * 10.0 * kept_t)
    # ignore the filter's edge transients
    inner = slice(20, -20)
    assert np.max(np.abs(out.v.real[inner] - expected[inner])) < 1e-3


def test_downsample_rejects_non_integer_ratio():
    series = series_from_voltage(np.ones(100, dtype=complex), dt=3e-4)
    with pytest.raises(ValueError, match="integer multiple"):
        sig.downsample(series, 1e-3)


# ---------------------------------------------------------------------------
# magnitude harmonic injection
# ---------------------------------------------------------------------------


def test_with_magnitude_harmonic_modulates_only_voltage():
    rng = np.random.default_rng(7)
    v = np.exp(1j * rng.uniform(-1, 1, 2048))
    series = sig.DqSeries(t0=0.0, dt=1e-3, v=v,
                          i=rng.standard_normal(2048) + 0j)
    out = sig.with_magnitude_harmonic(series, 150.0, 0.02)
    mod = np.abs(out.v) / np.abs(series.v)
    expected = 1.0 + 0.02 * np.sin(2.0 * np.pi * 150.0 * series.t)
    assert_allclose(mod, expected, atol=1e-12)
    assert np.array_equal(out.i, series.i)
