"""The complex-phase normal-form model and its simulation.

A grid-forming terminal is modeled as a Hammerstein-Wiener cascade: the
static input map takes terminal voltage and current to error coordinates

    e = (Re(v i*) - P_set,  Im(v i*) - Q_set,  |v|^2 - v_set^2),

a linear subsystem with real A, B and complex C, D produces the complex
frequency

    dx_c/dt = A x_c + B e,        eta = C x_c + D e,

and the output map integrates and exponentiates the complex phase:

    dTheta/dt = eta,              v = exp(Theta).

A and B stay real; C and D are genuinely complex (one complex output row
each for eta).  Model order n_ivars = dim(x_c) may be 0, in which case the
linear subsystem is pure feedthrough eta = D e.

Fitting happens on sampled data, so the subsystem is discretized exactly
under a zero-order hold and the phase integral uses a trapezoidal rule by
default (forward Euler available for ablation).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as _sla

from . import plants as _plants
from ._kernels import lti_forward
from .signals import DqSeries, PhaseSeries

#: phase-integration rules for the sampled model
RULES = ("trapezoid", "euler")


@dataclass(frozen=True)
class Setpoints:
    p: float = 0.5
    q: float = 0.0
    v: float = 1.0

    def __post_init__(self):
        if not self.v > 0:
            raise ValueError("voltage setpoint must be > 0")

    @property
    def nu(self) -> float:
        return self.v * self.v


def _as_matrix(m, shape, dtype) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(m, dtype=dtype).reshape(shape))
    if not np.all(np.isfinite(out.view(float) if dtype is complex else out)):
        raise ValueError("model matrices must be finite")
    return out


@dataclass(frozen=True)
class HwNormalForm:
    """Continuous-time normal-form parameters."""

    n_ivars: int
    a: np.ndarray              # real (n, n)
    b: np.ndarray              # real (n, 3)
    c: np.ndarray              # complex (n,)
    d: np.ndarray              # complex (3,)
    setpoints: Setpoints = field(default_factory=Setpoints)

    def __post_init__(self):
        n = self.n_ivars
        if n < 0:
            raise ValueError("n_ivars must be >= 0")
        if np.iscomplexobj(np.asarray(self.a)) or np.iscomplexobj(np.asarray(self.b)):
            raise ValueError("A and B must be real")
        object.__setattr__(self, "a", _as_matrix(self.a, (n, n), float))
        object.__setattr__(self, "b", _as_matrix(self.b, (n, 3), float))
        object.__setattr__(self, "c", _as_matrix(self.c, (n,), complex))
        object.__setattr__(self, "d", _as_matrix(self.d, (3,), complex))


@dataclass(frozen=True)
class HwDiscrete:
    """Zero-order-hold discretization of HwNormalForm at step dt."""

    n_ivars: int
    a_d: np.ndarray            # real (n, n)
    b_d: np.ndarray            # real (n, 3)
    c: np.ndarray              # complex (n,)
    d: np.ndarray              # complex (3,)
    dt: float
    setpoints: Setpoints = field(default_factory=Setpoints)

    def __post_init__(self):
        n = self.n_ivars
        if n < 0 or not self.dt > 0:
            raise ValueError("need n_ivars >= 0 and dt > 0")
        if np.iscomplexobj(np.asarray(self.a_d)) or np.iscomplexobj(np.asarray(self.b_d)):
            raise ValueError("A_d and B_d must be real")
        object.__setattr__(self, "a_d", _as_matrix(self.a_d, (n, n), float))
        object.__setattr__(self, "b_d", _as_matrix(self.b_d, (n, 3), float))
        object.__setattr__(self, "c", _as_matrix(self.c, (n,), complex))
        object.__setattr__(self, "d", _as_matrix(self.d, (3,), complex))


@dataclass(frozen=True)
class ErrorSeries:
    """Sampled 3-channel error-coordinate input trajectory."""

    t0: float
    dt: float
    e: np.ndarray              # (N, 3) real

    def __post_init__(self):
        e = np.ascontiguousarray(np.asarray(self.e, dtype=float))
        if e.ndim != 2 or e.shape[1] != 3 or e.shape[0] == 0:
            raise ValueError("e must be a non-empty (N, 3) array")
        if not np.all(np.isfinite(e)):
            raise ValueError("non-finite error samples")
        object.__setattr__(self, "e", e)

    def __len__(self) -> int:
        return self.e.shape[0]


def error_coordinates(v: complex, i: complex, sp: Setpoints) -> np.ndarray:
    """e = (P - P_set, Q - Q_set, |v|^2 - v_set^2) at one instant."""
    v = complex(v)
    i = complex(i)
    if not (np.isfinite(v) and np.isfinite(i)):
        raise ValueError("error_coordinates requires finite inputs")
    s = v * np.conjugate(i)
    return np.array([s.real - sp.p, s.imag - sp.q, abs(v) ** 2 - sp.nu])


def error_series(series: DqSeries, sp: Setpoints) -> ErrorSeries:
    """Vectorized error coordinates along a dq series."""
    s = series.v * np.conjugate(series.i)
    e = np.column_stack([s.real - sp.p, s.imag - sp.q,
                         np.abs(series.v) ** 2 - sp.nu])
    return ErrorSeries(t0=series.t0, dt=series.dt, e=e)


def discretize(model: HwNormalForm, dt: float) -> HwDiscrete:
    """Exact zero-order-hold discretization.

    Uses the augmented-matrix exponential
        exp([[A, B], [0, 0]] dt) = [[A_d, B_d], [0, I]],
    which also covers singular A (A = 0 gives A_d = I, B_d = dt B).
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    n = model.n_ivars
    if n == 0:
        a_d = np.zeros((0, 0))
        b_d = np.zeros((0, 3))
    else:
        aug = np.zeros((n + 3, n + 3))
        aug[:n, :n] = model.a
        aug[:n, n:] = model.b
        phi = _sla.expm(aug * dt)
        a_d = phi[:n, :n]
        b_d = phi[:n, n:]
    return HwDiscrete(n_ivars=n, a_d=a_d, b_d=b_d, c=model.c.copy(),
                      d=model.d.copy(), dt=dt, setpoints=model.setpoints)


def to_continuous(disc: HwDiscrete) -> tuple[HwNormalForm, bool]:
    """Invert the zero-order-hold map by matrix logarithm.

    Returns (model, used_bilinear_fallback).  The principal logarithm fails
    when A_d has eigenvalues on the closed negative real axis; in that case
    the inverse bilinear (Tustin) map is used instead and flagged, since no
    real continuous A reproduces such sampling behavior exactly.
    """
    n = disc.n_ivars
    if n == 0:
        return (HwNormalForm(0, np.zeros((0, 0)), np.zeros((0, 3)),
                             disc.c.copy(), disc.d.copy(), disc.setpoints), False)
    fallback = False
    eig = np.linalg.eigvals(disc.a_d)
    if np.any((eig.real <= 0) & (np.abs(eig.imag) < 1e-12 * np.maximum(1, np.abs(eig.real)))):
        fallback = True
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            loga = _sla.logm(disc.a_d)
        if np.max(np.abs(loga.imag)) > 1e-8 * max(1.0, np.max(np.abs(loga.real))):
            fallback = True
        else:
            a = loga.real / disc.dt
    if fallback:
        eye = np.eye(n)
        a = (2.0 / disc.dt) * np.linalg.solve((disc.a_d + eye).T, (disc.a_d - eye).T).T
    # recover B from the ZOH relation B_d = integral_0^dt expm(A s) ds * B
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = a
    aug[:n, n:] = np.eye(n)
    s_int = _sla.expm(aug * disc.dt)[:n, n:]
    b = np.linalg.solve(s_int, disc.b_d)
    model = HwNormalForm(n, a, b, disc.c.copy(), disc.d.copy(), disc.setpoints)
    return model, fallback


def markov_parameters(disc: HwDiscrete, count: int) -> np.ndarray:
    """Impulse response h_0 = D, h_k = C A_d^{k-1} B_d of the e -> eta map."""
    out = np.zeros((count, 3), dtype=complex)
    if count == 0:
        return out
    out[0] = disc.d
    if disc.n_ivars == 0:
        return out
    row = disc.c.copy()
    for k in range(1, count):
        out[k] = row @ disc.b_d
        row = row @ disc.a_d
    return out


def _open_loop_arrays(a_d, b_d, c, d, dt, e, theta0, x0, rule="trapezoid"):
    """Raw open-loop recursion; returns (theta, eta, states).

    No invariant checks: callers inside the optimizer need this to stay
    total even for wildly wrong parameter values.
    """
    nsamp = e.shape[0]
    n = a_d.shape[0]
    if n:
        states = lti_forward(a_d, b_d, e, np.asarray(x0, dtype=float))
        eta = states @ c + e @ d
    else:
        states = np.zeros((nsamp, 0))
        eta = e @ d
    theta = np.empty(nsamp, dtype=complex)
    theta[0] = theta0
    if nsamp > 1:
        if rule == "trapezoid":
            # eta just before t_{k+1}: updated state, input still held at e_k
            if n:
                eta_pre = states[1:] @ c + e[:-1] @ d
            else:
                eta_pre = e[:-1] @ d
            steps = 0.5 * dt * (eta[:-1] + eta_pre)
        elif rule == "euler":
            steps = dt * eta[:-1]
        else:
            raise ValueError(f"unknown phase-integration rule {rule!r}")
        theta[1:] = theta0 + np.cumsum(steps)
    return theta, eta, states


def simulate_open_loop(model: HwDiscrete, e_series: ErrorSeries, theta0: complex,
                       xc0=None, rule: str = "trapezoid"
                       ) -> tuple[PhaseSeries, np.ndarray]:
    """Drive the model with recorded inputs; returns (phase, voltage).

    The input samples are treated as held between instants (consistent with
    the zero-order-hold discretization); the phase integral uses the
    configured rule.  Voltage is exp(theta) at the sample instants.
    """
    if abs(e_series.dt - model.dt) > 1e-12 * max(model.dt, e_series.dt):
        raise ValueError(f"input dt {e_series.dt:g} does not match model dt {model.dt:g}")
    x0 = np.zeros(model.n_ivars) if xc0 is None else np.asarray(xc0, dtype=float)
    if x0.shape != (model.n_ivars,):
        raise ValueError(f"xc0 must have length {model.n_ivars}")
    theta, eta, _ = _open_loop_arrays(model.a_d, model.b_d, model.c, model.d,
                                      model.dt, e_series.e, complex(theta0), x0, rule)
    phase = PhaseSeries(t0=e_series.t0, dt=model.dt, theta=theta, eta=eta)
    return phase, np.exp(theta)


def simulate_closed_loop(model: HwDiscrete, network, t_span: float,
                         theta0: complex, xc0=None, events=(),
                         rule: str = "trapezoid") -> DqSeries:
    """Couple the model back through an algebraic network element.

    At every step the terminal current follows from the present voltage
    (explicit algebraic closure), the error coordinates feed the linear
    subsystem, and the phase advances by the configured rule.  Supports the
    same event scripts as plants.integrate.
    """
    dt = model.dt
    nsamp = int(round(t_span / dt)) + 1
    x = np.zeros(model.n_ivars) if xc0 is None else np.array(xc0, dtype=float)
    theta = complex(theta0)
    sp = model.setpoints

    ev_sorted = sorted(events, key=lambda ev: ev[0])
    pending = 0
    element = network

    v_out = np.empty(nsamp, dtype=complex)
    i_out = np.empty(nsamp, dtype=complex)
    for k in range(nsamp):
        t = k * dt
        while pending < len(ev_sorted) and round(ev_sorted[pending][0] / dt) <= k:
            element = _plants.apply_element_event(element, ev_sorted[pending][1], t)
            pending += 1
        if not np.isfinite(theta):
            raise _plants.NumericalDivergence("non-finite phase in closed loop", t)
        v = np.exp(theta)
        i = _plants.couple(v, element, t)
        v_out[k] = v
        i_out[k] = i
        if k == nsamp - 1:
            break
        s = v * np.conjugate(i)
        e = np.array([s.real - sp.p, s.imag - sp.q, abs(v) ** 2 - sp.nu])
        eta = (model.c @ x if model.n_ivars else 0.0) + model.d @ e
        x_next = model.a_d @ x + model.b_d @ e if model.n_ivars else x
        if rule == "trapezoid":
            eta_pre = (model.c @ x_next if model.n_ivars else 0.0) + model.d @ e
            theta = theta + 0.5 * dt * (eta + eta_pre)
        elif rule == "euler":
            theta = theta + dt * eta
        else:
            raise ValueError(f"unknown phase-integration rule {rule!r}")
        x = x_next
    return DqSeries(t0=0.0, dt=dt, v=v_out, i=i_out)


def equilibrium(model: HwNormalForm, network, theta_guess: complex = 0j,
                x_guess=None, max_iter: int = 60, tol: float = 1e-12):
    """Solve eta = 0, dx_c/dt = 0 under the network closure by damped Newton.

    Returns (theta_star, x_star) or None when the iteration does not
    converge (or hits a singular Jacobian, reported as a warning).
    """
    n = model.n_ivars
    z = np.zeros(n + 2)
    z[:2] = [complex(theta_guess).real, complex(theta_guess).imag]
    if x_guess is not None:
        z[2:] = np.asarray(x_guess, dtype=float)
    sp = model.setpoints

    def residual(zv):
        theta = zv[0] + 1j * zv[1]
        x = zv[2:]
        v = np.exp(theta)
        i = _plants.couple(v, network, t=0.0)
        s = v * np.conjugate(i)
        e = np.array([s.real - sp.p, s.imag - sp.q, abs(v) ** 2 - sp.nu])
        eta = (model.c @ x if n else 0.0) + model.d @ e
        out = np.empty(n + 2)
        out[0] = eta.real
        out[1] = eta.imag
        if n:
            out[2:] = model.a @ x + model.b @ e
        return out

    f = residual(z)
    for _ in range(max_iter):
        norm = np.max(np.abs(f))
        if norm < tol:
            theta = z[0] + 1j * z[1]
            return theta, z[2:].copy()
        # forward-difference Jacobian; the system is tiny (n + 2 unknowns)
        jac = np.empty((n + 2, n + 2))
        h = 1e-7
        for col in range(n + 2):
            dz = z.copy()
            dz[col] += h
            jac[:, col] = (residual(dz) - f) / h
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            warnings.warn("singular Jacobian in equilibrium search", stacklevel=2)
            return None
        lam = 1.0
        while lam > 1e-6:
            z_new = z + lam * step
            f_new = residual(z_new)
            if np.max(np.abs(f_new)) < norm:
                z, f = z_new, f_new
                break
            lam *= 0.5
        else:
            return None
    if np.max(np.abs(f)) < tol:
        theta = z[0] + 1j * z[1]
        return theta, z[2:].copy()
    return None
