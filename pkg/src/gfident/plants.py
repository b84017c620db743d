"""Reference grid-forming inverter simulators and network couplings.

These plants play the role of ground truth: trajectories generated here are
what the identification pipeline later has to explain.  Two control schemes
are provided, both as ideal voltage sources behind a first-order actuation
lag that stands in for the inner control loops:

* droop: frequency couples to active-power error through K_P, magnitude to
  reactive-power error through K_Q, with first-order power measurement
  filters tau_P, tau_Q,

      ddelta/dt = omega_rel + K_P (P_set - Pbar)
      tau_P dPbar/dt = P_m - Pbar,   tau_Q dQbar/dt = Q_m - Qbar
      V_ref = v_set + K_Q (Q_set - Qbar),  terminal v -> V_ref e^{j delta}

* dVOC: dispatchable virtual oscillator, amplitude regulation toward v_set
  plus power-error-driven rotation rotated by the impedance angle kappa.

Networks are algebraic one-port elements (stiff bus behind a line
admittance, resistive load, generic line) plus a two-inverter load-bus
arrangement used for islanding studies.  All quantities per-unit in the
global frame of signals.OMEGA0; integration is fixed-step classic RK4 with
parameter events applied exactly at event instants (the integrator restarts
there, so no step straddles a discontinuity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize as _opt

from . import _kernels as _k
from .signals import OMEGA0, DqSeries


class NumericalDivergence(RuntimeError):
    """Simulation state left the finite (or representable) range."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} at t={t:.6f} s")
        self.t = t


@dataclass(frozen=True)
class DroopParams:
    k_p: float = 0.02 * OMEGA0      # rad/s per pu power
    k_q: float = 0.05               # pu voltage per pu power
    tau_p: float = 0.05
    tau_q: float = 0.05
    tau_act: float = 0.002          # 0 = ideal source (no lag states)
    p_set: float = 0.5
    q_set: float = 0.0
    v_set: float = 1.0
    omega_set: float = OMEGA0

    def __post_init__(self):
        if not (self.tau_p > 0 and self.tau_q > 0):
            raise ValueError("tau_p and tau_q must be > 0")
        if self.tau_act < 0:
            raise ValueError("tau_act must be >= 0")
        if not self.v_set > 0:
            raise ValueError("v_set must be > 0")


@dataclass(frozen=True)
class DvocParams:
    eta_gain: float = 20.0          # 1/s synchronization gain
    alpha_gain: float = 10.0        # 1/s amplitude gain
    kappa: float = math.pi / 2.0    # impedance angle (pi/2 = inductive)
    tau_act: float = 0.002
    p_set: float = 0.5
    q_set: float = 0.0
    v_set: float = 1.0
    omega_set: float = OMEGA0

    def __post_init__(self):
        if not (self.eta_gain > 0 and self.alpha_gain > 0):
            raise ValueError("gains must be > 0")
        if self.tau_act < 0:
            raise ValueError("tau_act must be >= 0")
        if not self.v_set > 0:
            raise ValueError("v_set must be > 0")


@dataclass(frozen=True)
class StiffBus:
    """Ideal slack source of set magnitude/frequency behind a line admittance.

    The default line is deliberately weak (X = 1.25 pu): it keeps the voltage
    excursions of the excitation protocols small enough that the quadratic
    power-flow terms the linear normal form omits stay negligible.
    """

    y: complex = 1.0 / 1.25j        # line admittance to the slack node, pu
    v_mag: float = 1.0
    phase0: float = 0.0
    freq_dev: float = 0.0           # slack frequency minus frame frequency, rad/s
    t_ref: float = 0.0              # instant at which phase0 applies

    def __post_init__(self):
        if abs(self.y) <= 0:
            raise ValueError("line admittance must be nonzero")

    def slack_voltage(self, t: float = 0.0) -> complex:
        return self.v_mag * np.exp(1j * (self.phase0 + self.freq_dev * (t - self.t_ref)))


@dataclass(frozen=True)
class ResistiveLoad:
    g: float                        # conductance, pu

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError("load conductance must be > 0")


@dataclass(frozen=True)
class Line:
    """Series admittance toward a fixed far-end voltage (0 = short to ground)."""

    y: complex
    v_far: complex = 0j

    def __post_init__(self):
        if abs(self.y) <= 0:
            raise ValueError("line admittance must be nonzero")


@dataclass(frozen=True)
class MicroGrid:
    """Two inverters and a conductance load on one bus, auxiliary grid via breaker."""

    y1: complex = 1.0 / 0.2j
    y2: complex = 1.0 / 0.2j
    g_load: float = 1.0
    y_grid: complex = 1.0 / 0.1j
    slack_mag: float = 1.0
    slack_phase0: float = 0.0
    slack_freq_dev: float = 0.0
    slack_t_ref: float = 0.0
    breaker_closed: bool = True

    def bus_voltage(self, v1: complex, v2: complex, t: float = 0.0) -> complex:
        inj = self.y1 * v1 + self.y2 * v2
        ysum = self.y1 + self.y2 + self.g_load
        if self.breaker_closed:
            vs = self.slack_mag * np.exp(
                1j * (self.slack_phase0 + self.slack_freq_dev * (t - self.slack_t_ref)))
            inj += self.y_grid * vs
            ysum += self.y_grid
        return inj / ysum


NetworkElement = StiffBus | ResistiveLoad | Line


def couple(voltage: complex, element: NetworkElement, t: float = 0.0) -> complex:
    """Terminal current drawn from the inverter by an algebraic network element."""
    v = complex(voltage)
    if not np.isfinite(v):
        raise ValueError("couple requires a finite voltage")
    if isinstance(element, StiffBus):
        return (v - element.slack_voltage(t)) * element.y
    if isinstance(element, ResistiveLoad):
        return v * element.g
    if isinstance(element, Line):
        return (v - element.v_far) * element.y
    raise TypeError(f"unsupported network element {type(element).__name__}")


def matched_reactive_setpoint(
    p_set: float, v_set: float, network: StiffBus
) -> float:
    """Reactive setpoint that puts the stiff-bus operating point at v_set.

    Solves the power flow for the angle delivering ``p_set`` at magnitude
    ``v_set`` against the slack, and returns the reactive power flowing
    there.  Dispatching Q^s to this value makes the nominal equilibrium sit
    exactly at e = 0, the expansion point of the linear normal form; an
    arbitrary Q^s instead parks the plant at a permanent error offset where
    the model class picks up avoidable curvature.
    """
    if not isinstance(network, StiffBus):
        raise TypeError("matched_reactive_setpoint is defined for a stiff bus")
    if v_set <= 0:
        raise ValueError("v_set must be > 0")

    def active_power(delta: float) -> float:
        v = v_set * np.exp(1j * delta)
        return (v * np.conj(couple(v, network, t=network.t_ref))).real - p_set

    lo, hi = -0.499 * math.pi, 0.499 * math.pi
    if active_power(lo) * active_power(hi) > 0:
        raise ValueError(
            f"p_set={p_set} exceeds the line's transfer capability at "
            f"|v|={v_set}"
        )
    delta = _opt.brentq(active_power, lo, hi, xtol=1e-15)
    v = v_set * np.exp(1j * delta)
    return float((v * np.conj(couple(v, network, t=network.t_ref))).imag)


def _pack_net(element: NetworkElement) -> np.ndarray:
    if isinstance(element, StiffBus):
        return np.array([_k.NET_STIFF, element.y.real, element.y.imag, 0.0,
                         element.v_mag, element.phase0, element.freq_dev,
                         element.t_ref])
    if isinstance(element, ResistiveLoad):
        return np.array([_k.NET_LOAD, 0.0, 0.0, element.g, 0, 0, 0, 0], dtype=float)
    raise TypeError(f"integrate supports StiffBus and ResistiveLoad, got "
                    f"{type(element).__name__}")


class DroopPlant:
    """Droop-controlled grid-forming inverter."""

    kind = _k.DROOP

    def __init__(self, params: DroopParams | None = None, frame_omega: float = OMEGA0):
        self.params = params if params is not None else DroopParams()
        self.frame_omega = frame_omega

    @property
    def n_states(self) -> int:
        return 5 if self.params.tau_act > 0 else 3

    @property
    def state_names(self) -> tuple[str, ...]:
        base = ("delta", "p_bar", "q_bar")
        return base + ("vt_re", "vt_im") if self.params.tau_act > 0 else base

    @property
    def slowest_time_constant(self) -> float:
        return max(self.params.tau_p, self.params.tau_q, self.params.tau_act)

    def pack(self) -> np.ndarray:
        p = self.params
        return np.array([p.k_p, p.k_q, p.tau_p, p.tau_q, p.tau_act,
                         p.p_set, p.q_set, p.v_set, p.omega_set - self.frame_omega])

    def terminal_voltage(self, state) -> complex:
        return complex(_k.plant_voltage(self.kind, np.asarray(state, dtype=float),
                                        self.pack()))

    def rhs(self, state, terminal_current: complex) -> np.ndarray:
        return droop_rhs(state, terminal_current, self.params,
                         frame_omega=self.frame_omega)

    def flat_state(self, angle: float = 0.0) -> np.ndarray:
        """Setpoint-consistent starting guess (not an equilibrium in general)."""
        p = self.params
        x = [angle, p.p_set, p.q_set]
        if p.tau_act > 0:
            vt = (p.v_set + p.k_q * (p.q_set - p.q_set)) * np.exp(1j * angle)
            x += [vt.real, vt.imag]
        return np.array(x)


class DvocPlant:
    """Virtual-oscillator grid-forming inverter (dispatchable outer loop)."""

    kind = _k.DVOC

    def __init__(self, params: DvocParams | None = None, frame_omega: float = OMEGA0):
        self.params = params if params is not None else DvocParams()
        self.frame_omega = frame_omega

    @property
    def n_states(self) -> int:
        return 4 if self.params.tau_act > 0 else 2

    @property
    def state_names(self) -> tuple[str, ...]:
        base = ("vo_re", "vo_im")
        return base + ("vt_re", "vt_im") if self.params.tau_act > 0 else base

    @property
    def slowest_time_constant(self) -> float:
        return max(1.0 / self.params.eta_gain, 1.0 / self.params.alpha_gain,
                   self.params.tau_act)

    def pack(self) -> np.ndarray:
        p = self.params
        return np.array([p.eta_gain, p.alpha_gain, p.kappa, p.tau_act,
                         p.p_set, p.q_set, p.v_set, p.omega_set - self.frame_omega])

    def terminal_voltage(self, state) -> complex:
        return complex(_k.plant_voltage(self.kind, np.asarray(state, dtype=float),
                                        self.pack()))

    def rhs(self, state, terminal_current: complex) -> np.ndarray:
        return dvoc_rhs(state, terminal_current, self.params,
                        frame_omega=self.frame_omega)

    def flat_state(self, angle: float = 0.0) -> np.ndarray:
        p = self.params
        vo = p.v_set * np.exp(1j * angle)
        x = [vo.real, vo.imag]
        if p.tau_act > 0:
            x += [vo.real, vo.imag]
        return np.array(x)


Plant = DroopPlant | DvocPlant


def droop_rhs(state, terminal_current: complex, params: DroopParams,
              frame_omega: float = OMEGA0) -> np.ndarray:
    """Time derivative of the droop state for a given terminal current."""
    plant = DroopPlant(params, frame_omega)
    x = np.asarray(state, dtype=float)
    if x.shape != (plant.n_states,):
        raise ValueError(f"expected state of length {plant.n_states}")
    if not (np.all(np.isfinite(x)) and np.isfinite(terminal_current)):
        raise ValueError("droop_rhs requires finite inputs")
    dx = np.zeros_like(x)
    _k.plant_rhs(plant.kind, x, complex(terminal_current), plant.pack(), dx)
    return dx


def dvoc_rhs(state, terminal_current: complex, params: DvocParams,
             frame_omega: float = OMEGA0) -> np.ndarray:
    """Time derivative of the dVOC state for a given terminal current."""
    plant = DvocPlant(params, frame_omega)
    x = np.asarray(state, dtype=float)
    if x.shape != (plant.n_states,):
        raise ValueError(f"expected state of length {plant.n_states}")
    if not (np.all(np.isfinite(x)) and np.isfinite(terminal_current)):
        raise ValueError("dvoc_rhs requires finite inputs")
    dx = np.zeros_like(x)
    status = _k.plant_rhs(plant.kind, x, complex(terminal_current), plant.pack(), dx)
    if status == 2:
        raise ValueError("dVOC oscillator amplitude underflow")
    return dx


def _snap(t: float, dt: float) -> float:
    return round(t / dt) * dt


def _apply_event(net: np.ndarray, changes: dict, t_event: float) -> np.ndarray:
    """Return the packed single-port network after a parameter event."""
    out = net.copy()
    if int(out[0]) == _k.NET_STIFF:
        # carry the slack phase continuously across the event
        out[5] = out[5] + out[6] * (t_event - out[7])
        out[7] = t_event
    for key, value in changes.items():
        if key == "v_slack":
            out[4] = float(value)
        elif key == "freq_dev":
            out[6] = 2.0 * math.pi * float(value)
        elif key == "g_load":
            out[3] = float(value)
        else:
            raise ValueError(f"unknown event key {key!r} for this network")
    return out


def apply_element_event(element: NetworkElement, changes: dict,
                        t_event: float) -> NetworkElement:
    """Apply a timed parameter change to a network element.

    Stiff-bus phase is carried continuously across the event so frequency
    steps never introduce a phase jump.
    """
    if isinstance(element, StiffBus):
        element = replace(element,
                          phase0=element.phase0 + element.freq_dev * (t_event - element.t_ref),
                          t_ref=t_event)
        for key, value in changes.items():
            if key == "v_slack":
                element = replace(element, v_mag=float(value))
            elif key == "freq_dev":
                element = replace(element, freq_dev=2.0 * math.pi * float(value))
            else:
                raise ValueError(f"unknown event key {key!r} for a stiff bus")
        return element
    if isinstance(element, ResistiveLoad):
        for key, value in changes.items():
            if key == "g_load":
                element = replace(element, g=float(value))
            else:
                raise ValueError(f"unknown event key {key!r} for a resistive load")
        return element
    raise TypeError(f"events unsupported for {type(element).__name__}")


def integrate(plant: Plant, network: NetworkElement, t_span: float,
              dt_sim: float = 5e-5, events=(), dt_record: float | None = None,
              x0=None) -> DqSeries:
    """Fixed-step RK4 simulation of one plant against one network element.

    ``events`` is a sequence of (time, changes) pairs, changes being a dict
    with keys among v_slack (pu), freq_dev (Hz), g_load (pu).  Event times
    are snapped to the recording grid.  Returns terminal voltage and current
    sampled every ``dt_record`` (default: every simulation step).
    """
    if dt_record is None:
        dt_record = dt_sim
    stride = int(round(dt_record / dt_sim))
    if stride < 1 or abs(stride * dt_sim - dt_record) > 1e-12 * max(1.0, dt_record):
        raise ValueError("dt_record must be an integer multiple of dt_sim")
    n_rec = int(round(t_span / dt_record))
    if n_rec < 1:
        raise ValueError("t_span too short for one recording step")

    x = np.array(plant.flat_state() if x0 is None else x0, dtype=float)
    if x.shape != (plant.n_states,):
        raise ValueError(f"x0 must have length {plant.n_states}")
    p = plant.pack()
    net = _pack_net(network)

    times = sorted(float(te) for te, _ in events)
    if any(te < 0 or te > t_span for te in times):
        raise ValueError("event times must lie within [0, t_span]")
    boundaries = [0.0]
    for te, _ in sorted(events, key=lambda ev: ev[0]):
        ts = _snap(te, dt_record)
        if ts > boundaries[-1]:
            boundaries.append(ts)
    boundaries.append(t_span)

    ev_iter = iter(sorted(events, key=lambda ev: ev[0]))
    pending = next(ev_iter, None)
    while pending is not None and _snap(pending[0], dt_record) <= 0.0:
        net = _apply_event(net, pending[1], 0.0)
        pending = next(ev_iter, None)

    rec_v = np.empty(n_rec + 1, dtype=complex)
    rec_i = np.empty(n_rec + 1, dtype=complex)
    v0 = _k.plant_voltage(plant.kind, x, p)
    rec_v[0] = v0
    rec_i[0] = _k.net_current(net, v0, 0.0)
    rec_off = 1
    for seg in range(len(boundaries) - 1):
        t_a, t_b = boundaries[seg], boundaries[seg + 1]
        applied = False
        while pending is not None and _snap(pending[0], dt_record) <= t_a:
            net = _apply_event(net, pending[1], t_a)
            pending = next(ev_iter, None)
            applied = True
        if applied and seg > 0:
            # The boundary sample was written with the pre-event network;
            # the algebraic current jumps with the event, so the record
            # carries the right limit (the voltage is a continuous state).
            rec_i[rec_off - 1] = _k.net_current(net, rec_v[rec_off - 1], t_a)
        nsteps = int(round((t_b - t_a) / dt_sim))
        if nsteps == 0:
            continue
        status, steps, wrote = _k.rk4_segment(
            plant.kind, x, p, net, t_a, nsteps, dt_sim, stride, 0,
            rec_v, rec_i, rec_off)
        if status == 1:
            raise NumericalDivergence("non-finite state", t_a + steps * dt_sim)
        if status == 2:
            raise NumericalDivergence("dVOC oscillator amplitude underflow",
                                      t_a + steps * dt_sim)
        rec_off += wrote

    if rec_off != n_rec + 1:
        raise AssertionError("recording bookkeeping mismatch")
    return DqSeries(t0=0.0, dt=dt_record, v=rec_v, i=rec_i)


def integrate_microgrid(plant1: DroopPlant, plant2: DroopPlant, grid: MicroGrid,
                        t_span: float, dt_sim: float = 5e-5, events=(),
                        dt_record: float | None = None,
                        x0=None) -> tuple[DqSeries, DqSeries]:
    """Simulate the two-inverter micro-grid; returns one series per inverter.

    Both plants must carry an actuation lag (the load-bus closure needs the
    terminal voltages as states).  Supported event keys: breaker (bool),
    g_load, v_slack, freq_dev.
    """
    if plant1.params.tau_act <= 0 or plant2.params.tau_act <= 0:
        raise ValueError("micro-grid integration requires tau_act > 0 on both plants")
    if dt_record is None:
        dt_record = dt_sim
    stride = int(round(dt_record / dt_sim))
    if stride < 1 or abs(stride * dt_sim - dt_record) > 1e-12 * max(1.0, dt_record):
        raise ValueError("dt_record must be an integer multiple of dt_sim")
    n_rec = int(round(t_span / dt_record))

    if x0 is None:
        x = np.concatenate([plant1.flat_state(), plant2.flat_state()])
    else:
        x = np.array(x0, dtype=float)
    if x.shape != (10,):
        raise ValueError("micro-grid state must have length 10")
    p1, p2 = plant1.pack(), plant2.pack()

    g = grid
    rec = {name: np.empty(n_rec + 1, dtype=complex)
           for name in ("v1", "i1", "v2", "i2")}

    def apply_grid_event(g: MicroGrid, changes: dict, t_event: float) -> MicroGrid:
        phase_now = g.slack_phase0 + g.slack_freq_dev * (t_event - g.slack_t_ref)
        g = replace(g, slack_phase0=phase_now, slack_t_ref=t_event)
        for key, value in changes.items():
            if key == "breaker":
                g = replace(g, breaker_closed=bool(value))
            elif key == "g_load":
                g = replace(g, g_load=float(value))
            elif key == "v_slack":
                g = replace(g, slack_mag=float(value))
            elif key == "freq_dev":
                g = replace(g, slack_freq_dev=2.0 * math.pi * float(value))
            else:
                raise ValueError(f"unknown event key {key!r} for micro-grid")
        return g

    ev_iter = iter(sorted(events, key=lambda ev: ev[0]))
    pending = next(ev_iter, None)
    while pending is not None and _snap(pending[0], dt_record) <= 0.0:
        g = apply_grid_event(g, pending[1], 0.0)
        pending = next(ev_iter, None)

    v1 = x[3] + 1j * x[4]
    v2 = x[8] + 1j * x[9]
    vbus = g.bus_voltage(v1, v2, 0.0)
    rec["v1"][0], rec["i1"][0] = v1, g.y1 * (v1 - vbus)
    rec["v2"][0], rec["i2"][0] = v2, g.y2 * (v2 - vbus)
    rec_off = 1

    boundaries = [0.0]
    for te, _ in sorted(events, key=lambda ev: ev[0]):
        ts = _snap(te, dt_record)
        if 0.0 < ts <= t_span and ts > boundaries[-1]:
            boundaries.append(ts)
    boundaries.append(t_span)

    for seg in range(len(boundaries) - 1):
        t_a, t_b = boundaries[seg], boundaries[seg + 1]
        applied = False
        while pending is not None and _snap(pending[0], dt_record) <= t_a:
            g = apply_grid_event(g, pending[1], t_a)
            pending = next(ev_iter, None)
            applied = True
        if applied and seg > 0:
            # Right-limit convention at discontinuities: the load-bus
            # closure jumps with the event, so the boundary sample's
            # currents are recomputed (terminal voltages are lag states).
            v1 = x[3] + 1j * x[4]
            v2 = x[8] + 1j * x[9]
            vbus = g.bus_voltage(v1, v2, t_a)
            rec["i1"][rec_off - 1] = g.y1 * (v1 - vbus)
            rec["i2"][rec_off - 1] = g.y2 * (v2 - vbus)
        nsteps = int(round((t_b - t_a) / dt_sim))
        if nsteps == 0:
            continue
        slack = np.array([g.slack_mag, g.slack_phase0, g.slack_freq_dev,
                          g.slack_t_ref])
        status, steps, wrote = _k.rk4_segment_microgrid(
            x, p1, p2, complex(g.y1), complex(g.y2), float(g.g_load),
            complex(g.y_grid), slack, g.breaker_closed,
            t_a, nsteps, dt_sim, stride, 0,
            rec["v1"], rec["i1"], rec["v2"], rec["i2"], rec_off)
        if status != 0:
            raise NumericalDivergence("non-finite state", t_a + steps * dt_sim)
        rec_off += wrote

    s1 = DqSeries(t0=0.0, dt=dt_record, v=rec["v1"], i=rec["i1"])
    s2 = DqSeries(t0=0.0, dt=dt_record, v=rec["v2"], i=rec["i2"])
    return s1, s2


def equilibrium(plant: Plant, network: NetworkElement, x_guess=None) -> np.ndarray:
    """Solve rhs(x, couple(v(x), network)) = 0 for a true fixed point.

    Raises if the root search does not converge to a genuine equilibrium
    (networks with rotational symmetry, e.g. a detuned resistive load, have
    none; they settle into rotating quasi-steady states instead).
    """
    guess = np.array(plant.flat_state() if x_guess is None else x_guess, dtype=float)

    def fun(x):
        v = _k.plant_voltage(plant.kind, x, plant.pack())
        i = couple(v, network, t=0.0)
        dx = np.zeros_like(x)
        _k.plant_rhs(plant.kind, x, i, plant.pack(), dx)
        return dx

    sol = _opt.root(fun, guess, method="hybr", tol=1e-13)
    res = np.max(np.abs(fun(sol.x)))
    if not sol.success or res > 1e-9:
        raise NumericalDivergence(
            f"no equilibrium found (residual {res:.2e}); "
            "rotationally symmetric networks admit none", 0.0)
    return sol.x


def microgrid_equilibrium(plant1: DroopPlant, plant2: DroopPlant,
                          grid: MicroGrid, x_guess=None) -> np.ndarray:
    """Fixed point of the two-inverter micro-grid (breaker closed)."""
    if not grid.breaker_closed:
        raise ValueError("islanded micro-grid has no fixed point in a fixed frame")
    guess = (np.concatenate([plant1.flat_state(), plant2.flat_state()])
             if x_guess is None else np.array(x_guess, dtype=float))
    p1, p2 = plant1.pack(), plant2.pack()

    def fun(x):
        v1 = x[3] + 1j * x[4]
        v2 = x[8] + 1j * x[9]
        vbus = grid.bus_voltage(v1, v2, 0.0)
        dx = np.zeros(10)
        _k.plant_rhs(_k.DROOP, x[:5], grid.y1 * (v1 - vbus), p1, dx[:5])
        _k.plant_rhs(_k.DROOP, x[5:], grid.y2 * (v2 - vbus), p2, dx[5:])
        return dx

    sol = _opt.root(fun, guess, method="hybr", tol=1e-13)
    res = np.max(np.abs(fun(sol.x)))
    if not sol.success or res > 1e-9:
        raise NumericalDivergence(f"no micro-grid equilibrium (residual {res:.2e})", 0.0)
    return sol.x
