"""Reference plants: control laws, network couplings, integrator."""

import dataclasses
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import solve_ivp

import gfident as gf
from gfident import plants


# ---------------------------------------------------------------------------
# parameter / element validation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("bad", [
    dict(tau_p=0.0), dict(tau_q=-1.0), dict(tau_act=-0.1), dict(v_set=0.0),
])
def test_droop_params_rejects_nonphysical(bad):
    with pytest.raises(ValueError):
        gf.DroopParams(**bad)


@pytest.mark.parametrize("bad", [
    dict(eta_gain=0.0), dict(alpha_gain=-2.0), dict(tau_act=-0.1),
    dict(v_set=-1.0),
])
def test_dvoc_params_rejects_nonphysical(bad):
    with pytest.raises(ValueError):
        gf.DvocParams(**bad)


def test_network_elements_reject_degenerate_parameters():
    with pytest.raises(ValueError):
        gf.StiffBus(y=0j)
    with pytest.raises(ValueError):
        gf.ResistiveLoad(g=0.0)
    with pytest.raises(ValueError):
        plants.Line(y=0j)


def test_state_layout_follows_actuation_lag():
    assert gf.DroopPlant(gf.DroopParams(tau_act=0.0)).n_states == 3
    assert gf.DroopPlant(gf.DroopParams(tau_act=0.002)).n_states == 5
    assert gf.DvocPlant(gf.DvocParams(tau_act=0.0)).n_states == 2
    assert gf.DvocPlant(gf.DvocParams(tau_act=0.002)).state_names == (
        "vo_re", "vo_im", "vt_re", "vt_im")


# ---------------------------------------------------------------------------
# droop_rhs
# ---------------------------------------------------------------------------


def test_droop_rhs_setpoint_equilibrium():
    params = gf.DroopParams(tau_act=0.0)
    plant = gf.DroopPlant(params)
    state = [0.3, params.p_set, params.q_set]
    # filtered powers at their setpoints, bus at nominal frequency:
    # the angle stops moving and the reference magnitude is v_set.
    dx = gf.droop_rhs(state, 0.0 + 0.0j, params)
    assert dx[0] == 0.0
    assert plant.terminal_voltage(state) == pytest.approx(
        params.v_set * np.exp(0.3j))


def test_droop_rhs_proportional_frequency_term():
    params = gf.DroopParams(k_p=0.1, p_set=1.0, tau_act=0.0)
    dx = gf.droop_rhs([0.0, 0.9, params.q_set], 0.0j, params)
    assert dx[0] == pytest.approx(0.01, abs=1e-15)


def test_droop_rhs_power_filter_first_order_response():
    # Hold the measured power at p_set + 0.1 by choosing the current for
    # each visited state; the filtered power then follows the closed-form
    # first-order step response.
    params = gf.DroopParams(tau_act=0.0)
    plant = gf.DroopPlant(params)
    target = complex(params.p_set + 0.1, params.q_set)

    def rhs(_t, x):
        v = plant.terminal_voltage(x)
        return gf.droop_rhs(x, np.conj(target / v), params)

    x0 = [0.0, params.p_set, params.q_set]
    sol = solve_ivp(rhs, (0.0, params.tau_p), x0, rtol=1e-12, atol=1e-12)
    expected = params.p_set + 0.1 * (1.0 - math.exp(-1.0))
    assert sol.y[1, -1] == pytest.approx(expected, abs=1e-8)


def test_droop_rhs_validates_inputs():
    params = gf.DroopParams(tau_act=0.0)
    with pytest.raises(ValueError, match="length 3"):
        gf.droop_rhs([0.0, 0.0], 0.0j, params)
    with pytest.raises(ValueError, match="finite"):
        gf.droop_rhs([np.nan, 0.0, 0.0], 0.0j, params)
    with pytest.raises(ValueError, match="finite"):
        gf.droop_rhs([0.0, 0.0, 0.0], complex(np.inf, 0.0), params)


# ---------------------------------------------------------------------------
# dvoc_rhs
# ---------------------------------------------------------------------------


def test_dvoc_rhs_zero_at_matched_operating_point():
    params = gf.DvocParams(tau_act=0.0)
    for angle in (0.0, 0.7, -1.2):
        vo = params.v_set * np.exp(1j * angle)
        current = np.conj(complex(params.p_set, params.q_set) / vo)
        dx = gf.dvoc_rhs([vo.real, vo.imag], current, params)
        assert_allclose(dx, 0.0, atol=1e-14)


def test_dvoc_rhs_regulates_amplitude_upward():
    params = gf.DvocParams(tau_act=0.0)
    state = np.array([0.9, 0.0])
    dx = gf.dvoc_rhs(state, 0.0j, params)
    amp_rate = (state[0] * dx[0] + state[1] * dx[1]) / np.hypot(*state)
    assert amp_rate > 0.0


def test_dvoc_rhs_amplitude_underflow():
    params = gf.DvocParams(tau_act=0.0)
    with pytest.raises(ValueError, match="amplitude underflow"):
        gf.dvoc_rhs([1e-9, 0.0], 0.0j, params)


def test_dvoc_equilibrium_is_locally_stable():
    network = gf.StiffBus(y=-2.0j)
    params = dataclasses.replace(
        gf.DvocParams(),
        q_set=gf.matched_reactive_setpoint(0.5, 1.0, network),
    )
    plant = gf.DvocPlant(params)
    x_star = plants.equilibrium(plant, network)

    def closed_loop(x):
        v = plant.terminal_voltage(x)
        return plant.rhs(x, plants.couple(v, network))

    h = 1e-6
    n = x_star.size
    jac = np.empty((n, n))
    for k in range(n):
        dx = np.zeros(n)
        dx[k] = h
        jac[:, k] = (closed_loop(x_star + dx) - closed_loop(x_star - dx)) / (2 * h)
    assert np.max(np.linalg.eigvals(jac).real) < 0.0


# ---------------------------------------------------------------------------
# couple
# ---------------------------------------------------------------------------


def test_couple_stiff_bus_zero_at_slack_voltage():
    bus = gf.StiffBus(y=-2j, v_mag=1.0, phase0=0.4)
    assert plants.couple(bus.slack_voltage(), bus) == pytest.approx(0j)


def test_couple_resistive_load():
    assert plants.couple(1.0, gf.ResistiveLoad(g=0.5)) == 0.5


def test_couple_stiff_bus_reactive_flow():
    bus = gf.StiffBus(y=1.0 / 0.1j, v_mag=0.95)
    assert plants.couple(1.0, bus) == pytest.approx(-0.5j)


def test_couple_line_to_ground():
    assert plants.couple(1.0, plants.Line(y=2j)) == pytest.approx(2j)


def test_couple_rejects_bad_inputs():
    with pytest.raises(ValueError):
        plants.couple(complex(np.nan, 0), gf.ResistiveLoad(g=1.0))
    with pytest.raises(TypeError):
        plants.couple(1.0, object())


# ---------------------------------------------------------------------------
# matched_reactive_setpoint
# ---------------------------------------------------------------------------


def test_matched_reactive_setpoint_closed_form():
    # Purely inductive line y = -2j, both magnitudes 1: P = 2 sin(delta),
    # Q = 2 (1 - cos(delta)), so P = 0.5 gives Q = 2 - sqrt(15)/2.
    q = gf.matched_reactive_setpoint(0.5, 1.0, gf.StiffBus(y=-2.0j))
    assert q == pytest.approx(2.0 - math.sqrt(15.0) / 2.0, abs=1e-12)


def test_matched_reactive_setpoint_infeasible_transfer():
    with pytest.raises(ValueError, match="transfer capability"):
        gf.matched_reactive_setpoint(3.0, 1.0, gf.StiffBus(y=-2.0j))


def test_matched_reactive_setpoint_requires_stiff_bus():
    with pytest.raises(TypeError):
        gf.matched_reactive_setpoint(0.5, 1.0, gf.ResistiveLoad(g=1.0))


def test_matched_setpoints_put_equilibrium_at_references():
    network = gf.StiffBus()
    q = gf.matched_reactive_setpoint(0.5, 1.0, network)
    params = gf.DroopParams(p_set=0.5, q_set=q, v_set=1.0)
    plant = gf.DroopPlant(params)
    x_star = plants.equilibrium(plant, network)
    v = plant.terminal_voltage(x_star)
    i = plants.couple(v, network)
    s = v * np.conj(i)
    assert abs(v) == pytest.approx(1.0, abs=1e-9)
    assert s.real == pytest.approx(0.5, abs=1e-9)
    assert s.imag == pytest.approx(q, abs=1e-9)


# ---------------------------------------------------------------------------
# integrate: exactness, convergence, events, divergence
# ---------------------------------------------------------------------------


def _decay_setup():
    """Droop wired so the recorded magnitude encodes x' = -x, x(0) = 1.

    With a vanishing line admittance the measured powers are ~1e-30, so the
    reactive filter state decays freely: Qbar(t) = exp(-t) with tau_q = 1,
    and the terminal magnitude is v_set - k_q * Qbar(t).
    """
    params = gf.DroopParams(tau_q=1.0, tau_act=0.0, p_set=0.0, q_set=0.0)
    plant = gf.DroopPlant(params)
    network = gf.StiffBus(y=1e-30j)
    x0 = np.array([0.0, 0.0, 1.0])
    return plant, network, x0, params.k_q


def _decay_error(dt: float) -> float:
    plant, network, x0, k_q = _decay_setup()
    series = plants.integrate(plant, network, 1.0, dt_sim=dt, x0=x0)
    x_end = (1.0 - series.v[-1].real) / k_q
    return abs(x_end - math.exp(-1.0))


def test_integrate_scalar_decay_matches_closed_form():
    assert _decay_error(1e-3) < 1e-10


def test_integrate_rk4_convergence_order():
    errors = [_decay_error(dt) for dt in (0.05, 0.025, 0.0125)]
    orders = [math.log2(errors[k] / errors[k + 1]) for k in range(2)]
    assert all(3.8 <= order <= 4.2 for order in orders)


def test_integrate_validates_grid_and_events():
    plant = gf.DroopPlant()
    network = gf.StiffBus()
    with pytest.raises(ValueError, match="integer multiple"):
        plants.integrate(plant, network, 0.1, dt_sim=3e-5, dt_record=1e-4)
    with pytest.raises(ValueError, match="within"):
        plants.integrate(plant, network, 0.1,
                         events=((0.5, {"v_slack": 0.9}),))


def test_integrate_event_current_carries_right_limit():
    network = gf.StiffBus(y=-2j)
    q = gf.matched_reactive_setpoint(0.5, 1.0, network)
    plant = gf.DroopPlant(gf.DroopParams(p_set=0.5, q_set=q))
    x0 = plants.equilibrium(plant, network)
    series = plants.integrate(
        plant, network, 1.0, dt_record=1e-3, x0=x0,
        events=((0.5, {"v_slack": 0.9}),),
    )
    k = 500
    before = (series.v[k - 1] - 1.0) * network.y
    after = (series.v[k] - 0.9) * network.y
    assert series.i[k - 1] == pytest.approx(before, abs=1e-12)
    assert series.i[k] == pytest.approx(after, abs=1e-12)
    # the terminal voltage is an actuation-lag state: continuous across
    # the event, so adjacent samples stay close
    assert abs(series.v[k] - series.v[k - 1]) < 1e-3


def test_integrate_reports_divergence_time():
    plant = gf.DvocPlant(gf.DvocParams(tau_act=0.0))
    with pytest.raises(plants.NumericalDivergence, match="at t="):
        plants.integrate(plant, gf.ResistiveLoad(g=1.0), 0.5,
                         x0=np.array([1e-7, 0.0]))


# ---------------------------------------------------------------------------
# equilibrium behaviour over long horizons
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["droop", "dvoc"])
def test_equilibrium_hold_ten_seconds(kind):
    network = gf.StiffBus()
    q = gf.matched_reactive_setpoint(0.5, 1.0, network)
    if kind == "droop":
        plant = gf.DroopPlant(gf.DroopParams(p_set=0.5, q_set=q))
    else:
        plant = gf.DvocPlant(gf.DvocParams(p_set=0.5, q_set=q))
    x_star = plants.equilibrium(plant, network)
    series = plants.integrate(plant, network, 10.0, dt_record=1e-3, x0=x_star)
    assert np.max(np.abs(series.v - series.v[0])) < 1e-8
    assert np.max(np.abs(series.i - series.i[0])) < 1e-8


def test_recorded_current_is_the_controller_closure():
    # Power balance: the series satisfies the algebraic network law at every
    # sample, so complex_power(v, i) is exactly the controller's measured
    # power.
    network = gf.StiffBus(y=-2j)
    plant = gf.DroopPlant()
    series = plants.integrate(plant, network, 1.0, dt_record=1e-3,
                              events=((0.4, {"v_slack": 1.05}),))
    slack = np.where(series.t >= 0.4 - 1e-12, 1.05, 1.0)
    expected = (series.v - slack) * network.y
    assert np.max(np.abs(series.i - expected)) < 1e-9


def test_droop_entrains_to_nominal_bus():
    # With the slack at the frame frequency the angle settles where
    # K_P (P_set - Pbar) = 0, i.e. measured active power reaches P_set
    # regardless of the reactive dispatch.
    network = gf.StiffBus(y=-2j)
    plant = gf.DroopPlant(gf.DroopParams(p_set=0.5, q_set=0.0))
    series = plants.integrate(plant, network, 8.0, dt_record=1e-3)
    p_end = (series.v[-1] * np.conj(series.i[-1])).real
    assert p_end == pytest.approx(0.5, abs=1e-6)


def test_equilibrium_rejects_rotationally_symmetric_network():
    plant = gf.DroopPlant(gf.DroopParams(tau_act=0.0))
    with pytest.raises(plants.NumericalDivergence, match="equilibrium"):
        plants.equilibrium(plant, gf.ResistiveLoad(g=1.0))


# ---------------------------------------------------------------------------
# timed events on elements
# ---------------------------------------------------------------------------


def test_apply_element_event_carries_slack_phase():
    bus = gf.StiffBus(y=-2j, phase0=0.1, freq_dev=1.0)
    stepped = plants.apply_element_event(bus, {"freq_dev": 0.5}, t_event=2.0)
    assert stepped.freq_dev == pytest.approx(2.0 * math.pi * 0.5)
    assert stepped.slack_voltage(2.0) == pytest.approx(bus.slack_voltage(2.0))


def test_apply_element_event_validates_keys():
    with pytest.raises(ValueError, match="unknown event key"):
        plants.apply_element_event(gf.StiffBus(), {"g_load": 1.0}, 0.0)
    with pytest.raises(TypeError):
        plants.apply_element_event(plants.Line(y=-2j), {"v_slack": 1.0}, 0.0)
    load = plants.apply_element_event(
        gf.ResistiveLoad(g=1.0), {"g_load": 2.0}, 0.0)
    assert load.g == 2.0


# ---------------------------------------------------------------------------
# two-inverter micro-grid
# ---------------------------------------------------------------------------


def test_microgrid_bus_voltage_unanimous_sources():
    grid = plants.MicroGrid()
    v = grid.bus_voltage(1.0, 1.0, 0.0)
    ysum = grid.y1 + grid.y2 + grid.g_load + grid.y_grid
    assert v == pytest.approx((grid.y1 + grid.y2 + grid.y_grid) / ysum)


def test_microgrid_requires_actuation_lag():
    ideal = gf.DroopPlant(gf.DroopParams(tau_act=0.0))
    lagged = gf.DroopPlant()
    with pytest.raises(ValueError, match="tau_act"):
        plants.integrate_microgrid(ideal, lagged, plants.MicroGrid(), 0.1)


def test_microgrid_islanding_shares_load_by_droop_gains():
    # Equal inverters, breaker opened at 1 s: after the island settles both
    # carry the same active power and the common frequency sits where the
    # total droop deviation absorbs the load mismatch.
    plant = gf.DroopPlant(gf.DroopParams(p_set=0.3))
    grid = plants.MicroGrid(g_load=1.0, y_grid=-10j)
    x0 = plants.microgrid_equilibrium(plant, plant, grid)
    s1, s2 = plants.integrate_microgrid(
        plant, plant, grid, 6.0, dt_record=1e-3, x0=x0,
        events=((1.0, {"breaker": False}),),
    )
    p1 = (s1.v[-1] * np.conj(s1.i[-1])).real
    p2 = (s2.v[-1] * np.conj(s2.i[-1])).real
    assert p1 == pytest.approx(p2, abs=1e-6)
    # load sharing: identical plants split the island load evenly
    load = (p1 + p2) / 2.0
    assert p1 == pytest.approx(load, abs=1e-6)
    # the island frequency deviation matches the droop law prediction
    theta1 = np.unwrap(np.angle(s1.v[-200:]))
    omega_end = np.polyfit(s1.t[-200:], theta1, 1)[0]
    expected = plant.params.k_p * (plant.params.p_set - p1)
    assert omega_end == pytest.approx(expected, rel=1e-2)
