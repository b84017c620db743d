"""Compiled inner loops.

Fixed-step integration of the reference plants and the linear state
recursions of the model fit are the only hot paths in the package; they are
kept here as plain array-in/array-out functions so the surrounding modules
stay readable.  Everything is deterministic: no threading, no fastmath.

Packing conventions (mirrored by plants.py):

* droop params  p = [K_P, K_Q, tau_P, tau_Q, tau_act, p_set, q_set, v_set, omega_rel]
* dvoc params   p = [eta_gain, alpha_gain, kappa, tau_act, p_set, q_set, v_set, omega_rel]
* droop state   x = [delta, Pbar, Qbar(, vt_re, vt_im)]   (lag states iff tau_act > 0)
* dvoc state    x = [vo_re, vo_im(, vt_re, vt_im)]
* network       net = [kind, Y_re, Y_im, G, slack_mag, slack_phase0, slack_domega, t_ref]
                 kind 0 = stiff bus behind admittance Y, 1 = resistive load G

Status codes returned by the drivers: 0 ok, 1 non-finite state,
2 oscillator amplitude underflow.
"""

from __future__ import annotations

import numpy as np
from numba import njit

DROOP = 0
DVOC = 1

NET_STIFF = 0
NET_LOAD = 1

_AMP_FLOOR = 1e-6


@njit(cache=True)
def plant_voltage(kind, x, p):
    """Terminal voltage phasor of a packed plant state."""
    if kind == DROOP:
        if p[4] > 0.0:
            return x[3] + 1j * x[4]
        vref = p[7] + p[1] * (p[6] - x[2])
        return vref * np.exp(1j * x[0])
    # dVOC
    if p[3] > 0.0:
        return x[2] + 1j * x[3]
    return x[0] + 1j * x[1]


@njit(cache=True)
def net_current(net, v, t):
    """Current out of the inverter terminal into the network element."""
    if int(net[0]) == NET_STIFF:
        vslack = net[4] * np.exp(1j * (net[5] + net[6] * (t - net[7])))
        return (v - vslack) * (net[1] + 1j * net[2])
    return v * net[3]


@njit(cache=True)
def plant_rhs(kind, x, i_term, p, dx):
    """State derivative; returns a status code (0 ok, 2 amplitude underflow)."""
    if kind == DROOP:
        v = plant_voltage(kind, x, p)
        s = v * np.conj(i_term)
        pm = s.real
        qm = s.imag
        dx[0] = p[8] + p[0] * (p[5] - x[1])           # ddelta
        dx[1] = (pm - x[1]) / p[2]                    # dPbar
        dx[2] = (qm - x[2]) / p[3]                    # dQbar
        if p[4] > 0.0:
            vref = (p[7] + p[1] * (p[6] - x[2])) * np.exp(1j * x[0])
            dv = (vref - (x[3] + 1j * x[4])) / p[4]
            dx[3] = dv.real
            dx[4] = dv.imag
        return 0
    # dVOC outer loop on the oscillator phasor vo, fed by the terminal current
    vo = x[0] + 1j * x[1]
    amp2 = vo.real * vo.real + vo.imag * vo.imag
    if amp2 < _AMP_FLOOR * _AMP_FLOOR:
        return 2
    vs2 = p[6] * p[6]
    rot = np.exp(1j * p[2])
    sync = p[0] * rot * ((p[4] - 1j * p[5]) * vo / vs2 - i_term)
    ampl = p[1] * (1.0 - amp2 / vs2) * vo
    dvo = 1j * p[7] * vo + sync + ampl
    dx[0] = dvo.real
    dx[1] = dvo.imag
    if p[3] > 0.0:
        dv = (vo - (x[2] + 1j * x[3])) / p[3]
        dx[2] = dv.real
        dx[3] = dv.imag
    return 0


@njit(cache=True)
def rk4_segment(kind, x, p, net, t0, nsteps, dt, stride, phase0, rec_v, rec_i, rec_off):
    """Integrate one event-free segment, recording every ``stride`` steps.

    ``rec_off`` points at the slot for the first recorded sample *after* t0;
    the caller records the segment-start sample itself.  Returns
    (status, steps_done, records_written).
    """
    n = x.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    xt = np.empty(n)
    wrote = 0
    for step in range(nsteps):
        t = t0 + step * dt

        v = plant_voltage(kind, x, p)
        st = plant_rhs(kind, x, net_current(net, v, t), p, k1)
        if st != 0:
            return st, step, wrote
        for m in range(n):
            xt[m] = x[m] + 0.5 * dt * k1[m]
        v = plant_voltage(kind, xt, p)
        st = plant_rhs(kind, xt, net_current(net, v, t + 0.5 * dt), p, k2)
        if st != 0:
            return st, step, wrote
        for m in range(n):
            xt[m] = x[m] + 0.5 * dt * k2[m]
        v = plant_voltage(kind, xt, p)
        st = plant_rhs(kind, xt, net_current(net, v, t + 0.5 * dt), p, k3)
        if st != 0:
            return st, step, wrote
        for m in range(n):
            xt[m] = x[m] + dt * k3[m]
        v = plant_voltage(kind, xt, p)
        st = plant_rhs(kind, xt, net_current(net, v, t + dt), p, k4)
        if st != 0:
            return st, step, wrote
        for m in range(n):
            x[m] += (dt / 6.0) * (k1[m] + 2.0 * k2[m] + 2.0 * k3[m] + k4[m])

        if (step + 1 + phase0) % stride == 0:
            ok = True
            for m in range(n):
                if not np.isfinite(x[m]):
                    ok = False
            if not ok:
                return 1, step + 1, wrote
            tr = t0 + (step + 1) * dt
            vr = plant_voltage(kind, x, p)
            rec_v[rec_off + wrote] = vr
            rec_i[rec_off + wrote] = net_current(net, vr, tr)
            wrote += 1
    return 0, nsteps, wrote


@njit(cache=True)
def rk4_segment_microgrid(x, p1, p2, y1, y2, g_load, yg, slack, breaker,
                          t0, nsteps, dt, stride, phase0,
                          rec_v1, rec_i1, rec_v2, rec_i2, rec_off):
    """Two droop plants on a common load bus, optional stiff bus via breaker.

    x stacks both droop states (with actuation lags, 5 + 5).  slack =
    [mag, phase0, domega, t_ref].  KCL on the load bus gives the bus voltage
    explicitly, so the coupling stays algebraic.
    """
    k1 = np.empty(10)
    k2 = np.empty(10)
    k3 = np.empty(10)
    k4 = np.empty(10)
    xt = np.empty(10)
    ysum = y1 + y2 + g_load
    if breaker:
        ysum = ysum + yg
    wrote = 0
    for step in range(nsteps):
        t = t0 + step * dt
        for stage in range(4):
            if stage == 0:
                xs = x
                ts = t
            elif stage == 1:
                for m in range(10):
                    xt[m] = x[m] + 0.5 * dt * k1[m]
                xs = xt
                ts = t + 0.5 * dt
            elif stage == 2:
                for m in range(10):
                    xt[m] = x[m] + 0.5 * dt * k2[m]
                xs = xt
                ts = t + 0.5 * dt
            else:
                for m in range(10):
                    xt[m] = x[m] + dt * k3[m]
                xs = xt
                ts = t + dt
            v1 = xs[3] + 1j * xs[4]
            v2 = xs[8] + 1j * xs[9]
            inj = y1 * v1 + y2 * v2
            if breaker:
                vs = slack[0] * np.exp(1j * (slack[1] + slack[2] * (ts - slack[3])))
                inj = inj + yg * vs
            vbus = inj / ysum
            i1 = y1 * (v1 - vbus)
            i2 = y2 * (v2 - vbus)
            if stage == 0:
                plant_rhs(DROOP, xs[:5], i1, p1, k1[:5])
                plant_rhs(DROOP, xs[5:], i2, p2, k1[5:])
            elif stage == 1:
                plant_rhs(DROOP, xs[:5], i1, p1, k2[:5])
                plant_rhs(DROOP, xs[5:], i2, p2, k2[5:])
            elif stage == 2:
                plant_rhs(DROOP, xs[:5], i1, p1, k3[:5])
                plant_rhs(DROOP, xs[5:], i2, p2, k3[5:])
            else:
                plant_rhs(DROOP, xs[:5], i1, p1, k4[:5])
                plant_rhs(DROOP, xs[5:], i2, p2, k4[5:])
        for m in range(10):
            x[m] += (dt / 6.0) * (k1[m] + 2.0 * k2[m] + 2.0 * k3[m] + k4[m])

        if (step + 1 + phase0) % stride == 0:
            ok = True
            for m in range(10):
                if not np.isfinite(x[m]):
                    ok = False
            if not ok:
                return 1, step + 1, wrote
            ts = t0 + (step + 1) * dt
            v1 = x[3] + 1j * x[4]
            v2 = x[8] + 1j * x[9]
            inj = y1 * v1 + y2 * v2
            if breaker:
                vs = slack[0] * np.exp(1j * (slack[1] + slack[2] * (ts - slack[3])))
                inj = inj + yg * vs
            vbus = inj / ysum
            rec_v1[rec_off + wrote] = v1
            rec_i1[rec_off + wrote] = y1 * (v1 - vbus)
            rec_v2[rec_off + wrote] = v2
            rec_i2[rec_off + wrote] = y2 * (v2 - vbus)
            wrote += 1
    return 0, nsteps, wrote


@njit(cache=True)
def lti_forward(a_d, b_d, e, x0):
    """States of x_{k+1} = A_d x_k + B_d e_k; returns X with X[k] = x_k."""
    nsamp = e.shape[0]
    n = a_d.shape[0]
    out = np.empty((nsamp, n))
    x = x0.copy()
    for k in range(nsamp):
        for m in range(n):
            out[k, m] = x[m]
        if k < nsamp - 1:
            xn = b_d @ e[k]
            for m in range(n):
                acc = xn[m]
                for mm in range(n):
                    acc += a_d[m, mm] * x[mm]
                xn[m] = acc
            x = xn
    return out


@njit(cache=True)
def lti_adjoint(a_d_t, grad_x):
    """Backward sweep lam_j = g_j + A_d^T lam_{j+1} over the rows of grad_x."""
    nsamp = grad_x.shape[0]
    n = grad_x.shape[1]
    out = np.empty((nsamp, n))
    lam = np.zeros(n)
    for j in range(nsamp - 1, -1, -1):
        nxt = a_d_t @ lam
        for m in range(n):
            lam[m] = grad_x[j, m] + nxt[m]
        for m in range(n):
            out[j, m] = lam[m]
    return out
