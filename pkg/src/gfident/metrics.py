"""Fit quality metrics: per-channel R^2, voltage errors, spectra.

R^2 is always computed per record and per voltage channel (d and q
separately) — pooling records would let long easy records mask failures on
short hard ones.  Spectra use Hann-windowed periodogram densities so
harmonic content the model cannot reproduce shows up as flagged lines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as _scipy_signal

from . import signals as _signals
from .normalform import (
    HwDiscrete,
    HwNormalForm,
    Setpoints,
    _open_loop_arrays,
    discretize,
    error_series,
)


def r_squared(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Coefficient of determination for one channel of one record.

    Returns ``-inf`` when the prediction is non-finite (a diverged model is
    infinitely wrong, not an error).  Raises ``ValueError`` when the
    measured channel has zero variance, because R^2 is undefined there.
    """
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("r_squared expects two equal-length 1-d arrays")
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot <= 0.0:
        raise ValueError(
            "measured channel has zero variance; R^2 is undefined on it"
        )
    if not np.all(np.isfinite(y_pred)):
        return float("-inf")
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    return 1.0 - ss_res / ss_tot


@dataclass(frozen=True)
class RecordScore:
    """Replay quality of one record."""

    name: str
    r2_d: float
    r2_q: float
    max_abs_error: float
    mean_abs_error: float


@dataclass(frozen=True)
class EvalReport:
    """Per-record replay scores plus their plain averages."""

    records: tuple[RecordScore, ...]
    mean_r2_d: float
    mean_r2_q: float

    @property
    def mean_r2(self) -> float:
        return 0.5 * (self.mean_r2_d + self.mean_r2_q)

    @property
    def min_r2(self) -> float:
        return min(min(r.r2_d, r.r2_q) for r in self.records)


def predict_voltage(
    model: HwNormalForm | HwDiscrete,
    series: _signals.DqSeries,
    setpoints: Setpoints,
    rule: str = "trapezoid",
) -> np.ndarray:
    """Open-loop voltage replay of one record (inputs from measured data)."""
    disc = discretize(model, series.dt) if isinstance(model, HwNormalForm) else model
    if abs(disc.dt - series.dt) > 1e-12 * max(disc.dt, series.dt):
        raise ValueError("model sample time does not match the record")
    e = error_series(series, setpoints).e
    theta_m = _signals.to_phase(series).theta
    theta, _, _ = _open_loop_arrays(
        disc.a_d, disc.b_d, disc.c, disc.d, disc.dt, e, theta_m[0],
        np.zeros(disc.n_ivars), rule,
    )
    with np.errstate(over="ignore", invalid="ignore"):
        return np.exp(theta)


def evaluate(
    model: HwNormalForm | HwDiscrete,
    records: dict[str, _signals.DqSeries],
    setpoints: Setpoints,
    rule: str = "trapezoid",
) -> EvalReport:
    """Score the model's open-loop replay on every record, per channel."""
    if not records:
        raise ValueError("need at least one record to evaluate")
    rows = []
    for name in sorted(records):
        series = records[name]
        v_pred = predict_voltage(model, series, setpoints, rule)
        finite = np.all(np.isfinite(v_pred))
        abs_err = (
            np.abs(series.v - v_pred) if finite else np.full(len(v_pred), np.inf)
        )
        rows.append(
            RecordScore(
                name=name,
                r2_d=r_squared(series.v.real, v_pred.real),
                r2_q=r_squared(series.v.imag, v_pred.imag),
                max_abs_error=float(abs_err.max()),
                mean_abs_error=float(abs_err.mean()),
            )
        )
    return EvalReport(
        records=tuple(rows),
        mean_r2_d=float(np.mean([r.r2_d for r in rows])),
        mean_r2_q=float(np.mean([r.r2_q for r in rows])),
    )


def spectrum(x: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Hann periodogram density of one real channel.

    Returns (frequencies in Hz, power spectral density); the density
    integrates (sum times bin width) to the windowed mean-square power.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or len(x) < 8:
        raise ValueError("spectrum needs a 1-d channel of at least 8 samples")
    freqs, density = _scipy_signal.periodogram(
        x, fs=1.0 / dt, window="hann", detrend=False, scaling="density"
    )
    return freqs, density


#: Channels of a dq record that spectra can be computed on.
SPECTRUM_CHANNELS = ("v_d", "v_q", "v_mag")


def _channel(series: _signals.DqSeries, channel: str) -> np.ndarray:
    if channel == "v_d":
        return series.v.real
    if channel == "v_q":
        return series.v.imag
    if channel == "v_mag":
        return np.abs(series.v)
    raise ValueError(f"unknown spectrum channel {channel!r}")


@dataclass(frozen=True)
class SpectrumComparison:
    """Measured vs predicted spectral density of one voltage channel."""

    channel: str
    freqs: np.ndarray
    measured: np.ndarray
    predicted: np.ndarray
    flagged: tuple[tuple[float, float], ...]  # (frequency Hz, excess dB)


def spectrum_comparison(
    measured: _signals.DqSeries,
    predicted_v: np.ndarray,
    channel: str = "v_mag",
    flag_db: float = 10.0,
    prominence_db: float = 6.0,
) -> SpectrumComparison:
    """Compare spectra and flag measured lines the model fails to carry.

    A frequency is flagged when it is a prominent peak of the measured
    density (prominence >= ``prominence_db``) and the measured density
    exceeds the predicted one there by at least ``flag_db``.
    """
    if len(predicted_v) != len(measured.v):
        raise ValueError("prediction length does not match the record")
    x_meas = _channel(measured, channel)
    pred_series = _signals.DqSeries(
        t0=measured.t0, dt=measured.dt, v=predicted_v, i=measured.i
    )
    x_pred = _channel(pred_series, channel)
    freqs, dens_meas = spectrum(x_meas - x_meas.mean(), measured.dt)
    _, dens_pred = spectrum(x_pred - x_pred.mean(), measured.dt)

    floor = max(dens_meas.max(), dens_pred.max()) * 1e-16 + 1e-300
    db_meas = 10.0 * np.log10(dens_meas + floor)
    db_pred = 10.0 * np.log10(dens_pred + floor)
    peaks, _ = _scipy_signal.find_peaks(db_meas, prominence=prominence_db)
    flagged = tuple(
        (float(freqs[k]), float(db_meas[k] - db_pred[k]))
        for k in peaks
        if db_meas[k] - db_pred[k] >= flag_db
    )
    return SpectrumComparison(
        channel=channel,
        freqs=freqs,
        measured=dens_meas,
        predicted=dens_pred,
        flagged=flagged,
    )
