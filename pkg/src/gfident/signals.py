"""Coordinate transforms and the complex-phase calculus.

Everything downstream works on per-unit dq quantities in a single global
reference frame rotating at the nominal synchronous frequency.  Voltage and
current at one terminal are complex numbers v = v_d + j*v_q, i = i_d + j*i_q;
complex power is S = v * conj(i).  A voltage trajectory is equivalently
described by its complex phase

    Theta(t) = ln V(t) + j*phi(t),        v = exp(Theta),

whose time derivative eta = rho + j*omega collects the relative rate of
magnitude change (rho) and the instantaneous angular frequency (omega).

Conventions fixed here (and relied on by every other module):

* Park transform is amplitude-invariant (peak-value scaling) with the q axis
  lagging the d axis by 90 degrees: a balanced cosine set of amplitude 1
  aligned with the frame maps to exactly 1 + 0j.
* The global frame rotates at ``OMEGA0`` = 2*pi*50 rad/s by default.
* Phase unwrapping is the classic sequential rule with a pi threshold, valid
  whenever |omega|*dt < pi.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as _sps

#: nominal synchronous frequency of the global dq frame, rad/s
OMEGA0 = 2.0 * np.pi * 50.0

#: smallest voltage magnitude (pu) accepted by the log-magnitude map
EPSILON_V = 1e-6

#: relative tolerance for uniform-grid checks on ingested time columns
_DT_RTOL = 1e-9


@dataclass(frozen=True)
class DqSample:
    """One instant of a dq trajectory: time, voltage and current phasors."""

    t: float
    v: complex
    i: complex

    def __post_init__(self):
        if not (np.isfinite(self.t) and np.isfinite(self.v) and np.isfinite(self.i)):
            raise ValueError("DqSample requires finite t, v, i")


@dataclass(frozen=True)
class DqSeries:
    """Uniformly sampled complex voltage/current trajectory.

    Samples live on the grid ``t0 + k*dt``.  Arrays are stored directly
    (rather than a list of samples) so that the numerical pipeline can work
    on them without conversion; ``sample(k)`` gives the per-instant view.
    """

    t0: float
    dt: float
    v: np.ndarray
    i: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.v, dtype=complex)
        i = np.ascontiguousarray(self.i, dtype=complex)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "i", i)
        if v.ndim != 1 or v.shape != i.shape or v.size == 0:
            raise ValueError("v and i must be equal-length non-empty 1-d arrays")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError("dt must be positive and finite")
        if not (np.all(np.isfinite(v.view(float))) and np.all(np.isfinite(i.view(float)))):
            raise ValueError("non-finite samples in series")

    def __len__(self) -> int:
        return self.v.size

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.v.size)

    def sample(self, k: int) -> DqSample:
        return DqSample(float(self.t0 + k * self.dt), complex(self.v[k]), complex(self.i[k]))


@dataclass(frozen=True)
class PhaseSeries:
    """Unwrapped complex-phase trajectory Theta(t) = ln V + j*phi."""

    t0: float
    dt: float
    theta: np.ndarray
    #: optional complex frequency eta(t); filled by complex_frequency
    eta: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        theta = np.ascontiguousarray(self.theta, dtype=complex)
        object.__setattr__(self, "theta", theta)
        if theta.ndim != 1 or theta.size == 0:
            raise ValueError("theta must be a non-empty 1-d array")
        if not np.all(np.isfinite(theta.view(float))):
            raise ValueError("non-finite phase samples")
        jumps = np.abs(np.diff(theta.imag))
        if jumps.size and jumps.max() >= np.pi:
            raise ValueError("phase series violates the unwrapping contract (jump >= pi)")

    def __len__(self) -> int:
        return self.theta.size

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.theta.size)


@dataclass(frozen=True)
class PowerSample:
    """Active/reactive power and squared voltage magnitude at one instant."""

    P: float
    Q: float
    nu: float


def park_transform(abc, angle: float, balance_tol: float = 1e-6) -> complex:
    """Map instantaneous three-phase values to a complex dq value.

    Amplitude-invariant scaling with the q axis lagging d:

        v_d = (2/3) * (a*cos(th) + b*cos(th - 2pi/3) + c*cos(th + 2pi/3))
        v_q = -(2/3) * (a*sin(th) + b*sin(th - 2pi/3) + c*sin(th + 2pi/3))

    Parameters
    ----------
    abc : sequence of three floats (or arrays for vectorized use)
    angle : frame angle th in radians
    balance_tol : warn when |a+b+c| exceeds this fraction of the signal scale

    Returns
    -------
    complex v_d + j*v_q in the rotating frame.
    """
    a, b, c = (np.asarray(x, dtype=float) for x in abc)
    angle = np.asarray(angle, dtype=float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))
            and np.all(np.isfinite(angle))):
        raise ValueError("park_transform requires finite inputs")
    scale = max(float(np.max(np.abs(a) + np.abs(b) + np.abs(c))), 1.0)
    if float(np.max(np.abs(a + b + c))) > balance_tol * scale:
        warnings.warn("unbalanced three-phase input (a+b+c != 0)", stacklevel=2)
    th_b = angle - 2.0 * np.pi / 3.0
    th_c = angle + 2.0 * np.pi / 3.0
    vd = (2.0 / 3.0) * (a * np.cos(angle) + b * np.cos(th_b) + c * np.cos(th_c))
    vq = -(2.0 / 3.0) * (a * np.sin(angle) + b * np.sin(th_b) + c * np.sin(th_c))
    out = vd + 1j * vq
    return complex(out) if out.ndim == 0 else out

def inverse_park(v: complex, angle: float):
    """Reconstruct the balanced three-phase values behind a dq phasor."""
    v = np.asarray(v, dtype=complex)
    angle = np.asarray(angle, dtype=float)
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(angle))):
        raise ValueError("inverse_park requires finite inputs")
    a = np.real(v * np.exp(1j * angle))
    b = np.real(v * np.exp(1j * (angle - 2.0 * np.pi / 3.0)))
    c = np.real(v * np.exp(1j * (angle + 2.0 * np.pi / 3.0)))
    if a.ndim == 0:
        return float(a), float(b), float(c)
    return a, b, c

def complex_power(v, i) -> PowerSample:
    """S = P + jQ = v * conj(i); nu = |v|^2 rides along for the error map."""
    v = complex(v)
    i = complex(i)
    if not (np.isfinite(v) and np.isfinite(i)):
        raise ValueError("complex_power requires finite inputs")
    s = v * np.conj(i)
    return PowerSample(P=float(s.real), Q=float(s.imag), nu=float(abs(v) ** 2))

def to_phase(series: DqSeries, epsilon_v: float = EPSILON_V) -> PhaseSeries:
    """Complex phase Theta = ln|v| + j*unwrap(arg v) of a voltage trajectory.

    Raises if any sample magnitude is at or below ``epsilon_v`` (the log
    diverges near voltage collapse; such records are rejected, not patched).
    """
    mag = np.abs(series.v)
    if np.any(mag <= epsilon_v):
        k = int(np.argmax(mag <= epsilon_v))
        raise ValueError(
            f"voltage magnitude too small for complex phase "
            f"(|v|={mag[k]:.3e} <= {epsilon_v:g} at sample {k})")
    theta = np.log(mag) + 1j * np.unwrap(np.angle(series.v))
    return PhaseSeries(t0=series.t0, dt=series.dt, theta=theta)

def complex_frequency(phase: PhaseSeries) -> PhaseSeries:
    """Attach eta = dTheta/dt by central differences (one-sided at the ends).

    Diagnostic / initialization use only: differencing amplifies measurement
    noise by roughly 1/dt, so the fitting loss is always formulated on Theta
    itself, never on eta.
    """
    if len(phase) < 3:
        raise ValueError("complex_frequency needs at least 3 samples")
    eta = np.gradient(phase.theta, phase.dt)
    return PhaseSeries(t0=phase.t0, dt=phase.dt, theta=phase.theta, eta=eta)

def downsample(series: DqSeries, target_dt: float) -> DqSeries:
    """Anti-aliased decimation of a dq series to ``target_dt``.

    A 2nd-order Butterworth low-pass with cutoff at 40 % of the target
    Nyquist frequency is applied forward-backward (zero phase), then every
    n-th sample is kept.  ``target_dt`` must be an integer multiple of the
    source step; the identity case returns the series unchanged.
    """
    ratio = target_dt / series.dt
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-6:
        raise ValueError(
            f"target_dt {target_dt:g} is not an integer multiple of dt {series.dt:g}")
    if n == 1:
        return series
    cutoff = 0.4 * (0.5 / target_dt)
    sos = _sps.butter(2, cutoff, fs=1.0 / series.dt, output="sos")
    cols = np.column_stack([series.v.real, series.v.imag, series.i.real, series.i.imag])
    smooth = _sps.sosfiltfilt(sos, cols, axis=0)[::n]
    return DqSeries(t0=series.t0, dt=target_dt,
                    v=smooth[:, 0] + 1j * smooth[:, 1],
                    i=smooth[:, 2] + 1j * smooth[:, 3])

def with_magnitude_harmonic(series: DqSeries, freq_hz: float, amplitude: float) -> DqSeries:
    """Return a copy whose voltage magnitude carries an added sinusoid.

    Used to emulate harmonic content the model class cannot generate:
    |v| is modulated by (1 + amplitude*sin(2*pi*f*t)), currents untouched.
    """
    mod = 1.0 + amplitude * np.sin(2.0 * np.pi * freq_hz * series.t)
    return DqSeries(t0=series.t0, dt=series.dt, v=series.v * mod, i=series.i)
