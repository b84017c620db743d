"""Gray-box identification of the normal-form model from voltage records.

Two-stage fit: a deterministic subspace method (block-Hankel matrices,
row-space projection, SVD order truncation, least-squares recovery of the
state-space matrices) provides the starting point; quasi-Newton refinement
with an exact adjoint gradient then minimizes the summed squared complex
phase error of the open-loop replay.  The optimizer works directly on the
discrete-time parameters at the record sample time; the continuous model
is recovered afterwards through the matrix logarithm.

All randomness (restart perturbations) derives from named substreams of a
single seed, so identification results are reproducible bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from . import signals as _signals
from ._kernels import lti_adjoint, lti_forward
from .metrics import r_squared
from .normalform import (
    HwDiscrete,
    HwNormalForm,
    Setpoints,
    _open_loop_arrays,
    discretize,
    error_series,
    to_continuous,
)
from .seeding import substream

#: Names of the error-signal channels, in storage order.
ERROR_CHANNELS = ("P", "Q", "V")

#: Minimum per-channel input variance the subspace stage accepts.
EXCITATION_FLOOR = 1e-8

#: Consecutive quasi-Newton iterations inspected by the early-stop rule.
EARLY_STOP_WINDOW = 5

#: Validation-R^2 slack when picking the smallest adequate model order.
EPSILON_SELECT = 0.002


def estimate_eta(series: _signals.DqSeries) -> _signals.PhaseSeries:
    """Complex phase and finite-difference complex frequency of a record."""
    return _signals.complex_frequency(_signals.to_phase(series))


# ---------------------------------------------------------------------------
# subspace initialization
# ---------------------------------------------------------------------------


def _varx_markov(
    es: list[np.ndarray], ys: list[np.ndarray], lags: int, count: int
) -> np.ndarray:
    """Markov parameters of the e -> y map via an equation-error regression.

    The records come from closed-loop operation: the error signal feeds
    back from the phase through the network, so projection methods that
    treat future inputs as exogenous are biased here — as would be any
    regressor involving future inputs, which the loop ties back to the
    current target.  An equation-error regression on strictly causal
    regressors is not — with exact data the true model satisfies the
    difference equations no matter where the inputs came from.

    The coefficients are solved by plain least squares first: on data that
    an ARX of this lag order represents exactly, that recovers the impulse
    response exactly.  Feedback can leave the regressors collinear enough
    that the minimum-norm solution carries an unstable or wild autoregression
    (an artifact of the null space, not of the data); in that case the fit
    is repeated with a light ridge penalty on standardized columns, which
    suppresses the cancelling-coefficient solutions at the price of a small
    bias.  Returns impulse-response matrices G_0..G_{count-1}, each (2, 3).
    """
    my, mu = 2, 3
    cols = lags * my + (lags + 1) * mu
    rows = sum(max(len(y) - lags, 0) for y in ys)
    if rows < 2 * cols:
        raise ValueError(
            f"records too short for a lag-{lags} regression "
            f"({rows} usable samples, need at least {2 * cols})"
        )
    phi = np.empty((rows, cols))
    target = np.empty((rows, my))
    at = 0
    for e, y in zip(es, ys):
        n_use = len(y) - lags
        if n_use <= 0:
            continue
        block = phi[at:at + n_use]
        for j in range(1, lags + 1):
            block[:, (j - 1) * my:j * my] = y[lags - j:lags - j + n_use]
        base = lags * my
        for j in range(0, lags + 1):
            block[:, base + j * mu:base + (j + 1) * mu] = (
                e[lags - j:lags - j + n_use]
            )
        target[at:at + n_use] = y[lags:lags + n_use]
        at += n_use

    def impulse(coef: np.ndarray) -> tuple[np.ndarray, float]:
        a_lags = [coef[(j - 1) * my:j * my].T for j in range(1, lags + 1)]
        base = lags * my
        b_lags = [coef[base + j * mu:base + (j + 1) * mu].T
                  for j in range(lags + 1)]
        comp = np.zeros((lags * my, lags * my))
        for j, a in enumerate(a_lags):
            comp[:my, j * my:(j + 1) * my] = a
        if lags > 1:
            comp[my:, :-my] = np.eye((lags - 1) * my)
        radius = float(np.abs(np.linalg.eigvals(comp)).max())
        markov = np.zeros((count, my, mu))
        for m in range(count):
            g = b_lags[m].copy() if m <= lags else np.zeros((my, mu))
            for j in range(1, min(m, lags) + 1):
                g += a_lags[j - 1] @ markov[m - j]
            markov[m] = g
        return markov, radius

    coef, _, rank, _ = np.linalg.lstsq(phi, target, rcond=None)
    markov, radius = impulse(coef)
    if rank == cols and radius < 1.0:
        return markov
    col_scale = np.maximum(np.sqrt(np.mean(phi * phi, axis=0)), 1e-30)
    phi_s = phi / col_scale
    gram = phi_s.T @ phi_s
    gram[np.diag_indices_from(gram)] += 1e-8 * rows
    coef = np.linalg.solve(gram, phi_s.T @ target) / col_scale[:, None]
    markov, _ = impulse(coef)
    return markov


def check_excitation(
    inputs: list[np.ndarray], floor: float = EXCITATION_FLOOR
) -> None:
    """Raise when any error channel is essentially unexcited in the data."""
    stacked = np.concatenate([np.asarray(e, dtype=float) for e in inputs], axis=0)
    for j, channel in enumerate(ERROR_CHANNELS):
        var = float(stacked[:, j].var())
        if var <= floor:
            raise ValueError(
                f"{channel} error channel variance {var:.3e} is at or below "
                f"the excitation floor {floor:.1e}; this data cannot "
                "identify that channel's gain"
            )


def reflect_unstable(a_d: np.ndarray) -> tuple[np.ndarray, bool]:
    """Mirror unstable discrete eigenvalues into the unit disk.

    ``z -> z / |z|^2`` preserves the eigenvalue's angle and inverts its
    radius, which is exactly a sign flip of the real part of the matching
    continuous eigenvalue.  Returns (matrix, whether anything changed).
    """
    if a_d.size == 0:
        return a_d, False
    vals, vecs = np.linalg.eig(a_d)
    mags = np.abs(vals)
    if np.all(mags < 1.0):
        return a_d, False
    vals = np.where(mags >= 1.0, vals / np.maximum(mags, 1e-12) ** 2, vals)
    # eigenvalues of a defective matrix may make vecs singular; fall back to
    # plain radial shrinkage in that case
    try:
        fixed = np.real(vecs @ np.diag(vals) @ np.linalg.inv(vecs))
    except np.linalg.LinAlgError:
        fixed = a_d * (0.99 / mags.max())
    return fixed, True


def subspace_init(
    inputs: list[np.ndarray],
    outputs: list[np.ndarray],
    n_ivars: int,
    dt: float,
    setpoints: Setpoints,
    excitation_floor: float = EXCITATION_FLOOR,
    hankel_rows: int | None = None,
) -> HwDiscrete:
    """Initial discrete model from input/output data by a subspace method.

    ``inputs`` are error-signal arrays (N, 3); ``outputs`` the matching
    complex-frequency arrays (N,).  The complex output is handled as two
    real channels.  A long equation-error regression (safe on closed-loop
    records) estimates the impulse response; a block-Hankel SVD truncated
    at the requested order then realizes the state-space matrices by least
    squares.  Unstable estimated dynamics are reflected into the stable
    region before being returned.
    """
    if len(inputs) == 0 or len(inputs) != len(outputs):
        raise ValueError("need matching, non-empty input and output lists")
    if n_ivars < 0:
        raise ValueError("model order must be non-negative")
    check_excitation(inputs, excitation_floor)

    es = [np.ascontiguousarray(e, dtype=float) for e in inputs]
    ys = [
        np.column_stack((np.asarray(y).real, np.asarray(y).imag))
        for y in outputs
    ]
    for e, y in zip(es, ys):
        if e.ndim != 2 or e.shape[1] != 3 or len(e) != len(y):
            raise ValueError("inputs must be (N, 3) matching their outputs")

    if n_ivars == 0:
        e_all = np.concatenate(es, axis=0)
        y_all = np.concatenate(ys, axis=0)
        sol, *_ = np.linalg.lstsq(e_all, y_all, rcond=None)
        d = sol[:, 0] + 1j * sol[:, 1]
        return HwDiscrete(
            n_ivars=0,
            a_d=np.zeros((0, 0)),
            b_d=np.zeros((0, 3)),
            c=np.zeros(0, dtype=complex),
            d=d,
            dt=dt,
            setpoints=setpoints,
        )

    depth = _hankel_depth(n_ivars, hankel_rows)
    lags = max(2 * n_ivars, 12)
    markov = _varx_markov(es, ys, lags, 2 * depth)
    return _realize(markov, n_ivars, depth, dt, setpoints)


def _hankel_depth(n_ivars: int, hankel_rows: int | None) -> int:
    depth = hankel_rows if hankel_rows is not None else max(n_ivars + 2, 25)
    if depth < n_ivars + 1:
        raise ValueError("hankel_rows must exceed the requested order")
    return depth


#: Discrete eigenvalue given to padding states when the Hankel rank falls
#: short of the requested order (fast, strictly stable, logm-safe).
_PAD_EIGENVALUE = 0.5


def _realize(
    markov: np.ndarray, n_ivars: int, depth: int, dt: float,
    setpoints: Setpoints,
) -> HwDiscrete:
    """Ho-Kalman realization of estimated Markov parameters.

    SVD of the block-Hankel of G_1, G_2, ... truncated at the requested
    order.  When the data only supports a lower rank, the realization is
    built at that rank and padded with quiescent states (zero input and
    output maps, fast stable eigenvalue), so an over-ordered request
    degrades gracefully instead of failing.
    """
    my, mu = 2, 3
    hankel = np.empty((depth * my, depth * mu))
    for r in range(depth):
        for q in range(depth):
            hankel[r * my:(r + 1) * my, q * mu:(q + 1) * mu] = markov[r + q + 1]
    u_svd, s, vt = np.linalg.svd(hankel, full_matrices=False)
    rank = int(np.sum(s > max(s[0], 1e-30) * 1e-10))
    n_use = min(n_ivars, rank)

    if n_use == 0:
        a_d = _PAD_EIGENVALUE * np.eye(n_ivars)
        b_d = np.zeros((n_ivars, mu))
        c2 = np.zeros((my, n_ivars))
    else:
        gamma = u_svd[:, :n_use] * np.sqrt(s[:n_use])
        omega = np.sqrt(s[:n_use])[:, None] * vt[:n_use]
        c2 = gamma[:my]
        b_d = omega[:, :mu]
        a_d, *_ = np.linalg.lstsq(gamma[:-my], gamma[my:], rcond=None)
        if n_use < n_ivars:
            pad = n_ivars - n_use
            a_d = np.block([
                [a_d, np.zeros((n_use, pad))],
                [np.zeros((pad, n_use)), _PAD_EIGENVALUE * np.eye(pad)],
            ])
            b_d = np.vstack((b_d, np.zeros((pad, mu))))
            c2 = np.hstack((c2, np.zeros((my, pad))))
    if n_use < n_ivars:
        warnings.warn(
            f"data supports a rank-{rank} realization; order {n_ivars} was "
            "padded with quiescent states",
            stacklevel=3,
        )
    d2 = markov[0]

    a_d, flipped = reflect_unstable(a_d)
    if flipped:
        warnings.warn(
            "subspace estimate was unstable; eigenvalues were reflected "
            "into the stable region",
            stacklevel=3,
        )
    return HwDiscrete(
        n_ivars=n_ivars,
        a_d=np.ascontiguousarray(a_d),
        b_d=np.ascontiguousarray(b_d),
        c=np.ascontiguousarray(c2[0] + 1j * c2[1]),
        d=np.ascontiguousarray(d2[0] + 1j * d2[1]),
        dt=dt,
        setpoints=setpoints,
    )


def _increment_init(problem: "_Problem", hankel_rows: int | None) -> HwDiscrete:
    """Subspace initialization regressed on one-step phase increments.

    The replay loss advances the phase by the state-trapezoid rule with the
    input held across each step, so on data this model class represents
    exactly the increments satisfy

        (theta_{k+1} - theta_k) / dt = C (I + A_d)/2 x_k + (D + C B_d/2) e_k,

    a strictly causal LTI map with the same dynamics.  Fitting it avoids
    both pitfalls of differentiating the phase first (a finite-difference
    eta target smears neighbouring samples together, which no model of the
    requested order reproduces) and of regressing on future inputs (the
    loop ties e_{k+1} back to the current increment, letting the regression
    "explain" the target by inverting the feedback).  The realized output
    maps are then read back through the increment lens:

        C = 2 C~ (I + A_d)^{-1},   D = D~ - C B_d / 2.
    """
    n = problem.n_ivars
    dt = problem.dt
    es = [np.ascontiguousarray(e, dtype=float) for e in problem.errors]
    check_excitation(es)
    incs = [np.diff(theta) / dt for theta in problem.thetas]
    if n == 0:
        design = np.concatenate([e[:-1] for e in es], axis=0)
        target = np.concatenate(incs)
        sol, *_ = np.linalg.lstsq(design, target, rcond=None)
        return HwDiscrete(
            n_ivars=0,
            a_d=np.zeros((0, 0)),
            b_d=np.zeros((0, 3)),
            c=np.zeros(0, dtype=complex),
            d=sol,
            dt=dt,
            setpoints=problem.setpoints,
        )
    ys = [np.column_stack((inc.real, inc.imag)) for inc in incs]
    depth = _hankel_depth(n, hankel_rows)
    # Minimal lag order that can represent n states with two output
    # channels.  More lags would be redundant: the extra regressors then
    # satisfy the model's own difference equation, the design matrix loses
    # rank, and the minimum-norm solution distorts the impulse response.
    lags = -(-n // 2)
    markov = _varx_markov(es, ys, lags, 2 * depth)
    lens = _realize(markov, n, depth, dt, problem.setpoints)
    c = 2.0 * np.linalg.solve(
        np.eye(n) + lens.a_d.T, lens.c
    )
    d = lens.d - (c @ lens.b_d) / 2.0
    return HwDiscrete(
        n_ivars=n,
        a_d=lens.a_d,
        b_d=lens.b_d,
        c=np.ascontiguousarray(c),
        d=np.ascontiguousarray(d),
        dt=dt,
        setpoints=problem.setpoints,
    )


# ---------------------------------------------------------------------------
# exact least-squares recovery of the I/O maps on the phase loss
# ---------------------------------------------------------------------------
#
# With A_d, B_d held fixed, the predicted phase is affine in (C, D): each
# sample is a cumulative sum of terms linear in them, so the phase loss is
# an ordinary least-squares problem that can be solved exactly.  Likewise,
# with A_d, C, D fixed the state response is linear in B_d by superposition.
# Alternating the two solves turns a subspace estimate whose free-run phase
# drifts (any small bias in C or D integrates over the record) into a
# starting point already close to the optimum.


def _phase_targets(problem: "_Problem") -> list[np.ndarray]:
    return [theta[1:] - theta[0] for theta in problem.thetas]


def _phase_ls_cd(
    problem: "_Problem", a_d: np.ndarray, b_d: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact least-squares fit of C and D given the state trajectory."""
    n = a_d.shape[0]
    dt = problem.dt
    blocks, rhs = [], []
    for theta_y, e in zip(_phase_targets(problem), problem.errors):
        z_d = dt * np.cumsum(e[:-1], axis=0)
        if n:
            states = lti_forward(a_d, b_d, e, np.zeros(n))
            z_c = 0.5 * dt * np.cumsum(states[:-1] + states[1:], axis=0)
            blocks.append(np.hstack((z_c, z_d)))
        else:
            blocks.append(z_d)
        rhs.append(theta_y)
    design = np.vstack(blocks).astype(complex)
    sol, *_ = np.linalg.lstsq(design, np.concatenate(rhs), rcond=None)
    return sol[:n], sol[n:]


def _phase_ls_b(
    problem: "_Problem", a_d: np.ndarray, c: np.ndarray, d: np.ndarray
) -> np.ndarray:
    """Exact least-squares fit of B_d given A_d and the output maps."""
    n = a_d.shape[0]
    dt = problem.dt
    blocks, rhs = [], []
    for theta_y, e in zip(_phase_targets(problem), problem.errors):
        rhs.append(theta_y - dt * np.cumsum(e[:-1] @ d))
        cols = []
        for i in range(n):
            for j in range(3):
                basis = np.zeros((n, 3))
                basis[i, j] = 1.0
                states = lti_forward(a_d, basis, e, np.zeros(n))
                cols.append(0.5 * dt * np.cumsum((states[:-1] + states[1:]) @ c))
        blocks.append(np.column_stack(cols))
    design = np.vstack(blocks)
    target = np.concatenate(rhs)
    stacked = np.vstack((design.real, design.imag))
    sol, *_ = np.linalg.lstsq(
        stacked, np.concatenate((target.real, target.imag)), rcond=None
    )
    return sol.reshape(n, 3)


def refine_io_maps(
    problem: "_Problem", init: HwDiscrete, rounds: int = 3
) -> HwDiscrete:
    """Alternating exact least squares on (C, D) and B_d at fixed A_d."""
    a_d, b_d = init.a_d, init.b_d
    c, d = init.c, init.d
    for _ in range(rounds):
        c, d = _phase_ls_cd(problem, a_d, b_d)
        if init.n_ivars:
            b_d = _phase_ls_b(problem, a_d, c, d)
    if init.n_ivars:
        c, d = _phase_ls_cd(problem, a_d, b_d)
    return HwDiscrete(
        n_ivars=init.n_ivars,
        a_d=a_d,
        b_d=np.ascontiguousarray(b_d),
        c=np.ascontiguousarray(c),
        d=np.ascontiguousarray(d),
        dt=init.dt,
        setpoints=init.setpoints,
    )


# ---------------------------------------------------------------------------
# loss and exact gradient on the discrete parameters
# ---------------------------------------------------------------------------


def pack_params(model: HwDiscrete) -> np.ndarray:
    """Flatten the free discrete parameters into one real vector.

    Layout: vec(A_d), vec(B_d), Re C, Im C, Re D, Im D.  The initial phase
    and internal state are not parameters (the phase starts at the measured
    value, the internal state at rest).
    """
    n = model.n_ivars
    return np.concatenate((
        model.a_d.ravel(),
        model.b_d.ravel(),
        model.c.real,
        model.c.imag,
        model.d.real,
        model.d.imag,
    )) if n else np.concatenate((model.d.real, model.d.imag))


def unpack_params(
    vec: np.ndarray, n_ivars: int, dt: float, setpoints: Setpoints
) -> HwDiscrete:
    """Inverse of :func:`pack_params`."""
    vec = np.asarray(vec, dtype=float)
    n = n_ivars
    if vec.shape != (n * n + 5 * n + 6,):
        raise ValueError(f"parameter vector must have length {n * n + 5 * n + 6}")
    if n:
        a_d = vec[: n * n].reshape(n, n)
        b_d = vec[n * n: n * n + 3 * n].reshape(n, 3)
        c = vec[n * n + 3 * n: n * n + 4 * n] + 1j * vec[n * n + 4 * n: n * n + 5 * n]
        tail = vec[n * n + 5 * n:]
    else:
        a_d = np.zeros((0, 0))
        b_d = np.zeros((0, 3))
        c = np.zeros(0, dtype=complex)
        tail = vec
    d = tail[:3] + 1j * tail[3:]
    return HwDiscrete(
        n_ivars=n, a_d=a_d.copy(), b_d=b_d.copy(), c=c, d=d, dt=dt,
        setpoints=setpoints,
    )


@dataclass(frozen=True)
class _Problem:
    """Prepared fitting data: one (theta, e) pair per record."""

    thetas: tuple[np.ndarray, ...]
    errors: tuple[np.ndarray, ...]
    dt: float
    n_ivars: int
    setpoints: Setpoints

    @property
    def n_samples(self) -> int:
        return sum(len(t) for t in self.thetas)


def _prepare(
    records: Mapping[str, _signals.DqSeries] | Sequence[_signals.DqSeries],
    setpoints: Setpoints,
    n_ivars: int,
) -> _Problem:
    if isinstance(records, Mapping):
        records = [records[name] for name in sorted(records)]
    else:
        records = list(records)
    if len(records) == 0:
        raise ValueError("need at least one record")
    dt = records[0].dt
    thetas, errors = [], []
    for series in records:
        if abs(series.dt - dt) > 1e-12 * dt:
            raise ValueError("all records must share one sample time")
        thetas.append(_signals.to_phase(series).theta)
        errors.append(error_series(series, setpoints).e)
    return _Problem(
        thetas=tuple(thetas), errors=tuple(errors), dt=dt, n_ivars=n_ivars,
        setpoints=setpoints,
    )


def _loss_terms(
    p: np.ndarray, problem: _Problem, with_grad: bool
) -> tuple[float, np.ndarray | None]:
    """Total squared phase error and (optionally) its exact gradient."""
    n = problem.n_ivars
    dt = problem.dt
    model = unpack_params(p, n, dt, problem.setpoints)
    a_d, b_d, c, d = model.a_d, model.b_d, model.c, model.d

    total = 0.0
    if with_grad:
        g_a = np.zeros((n, n))
        g_b = np.zeros((n, 3))
        g_c = np.zeros(n, dtype=complex)
        g_d = np.zeros(3, dtype=complex)
    for theta_m, e in zip(problem.thetas, problem.errors):
        theta, _, states = _open_loop_arrays(
            a_d, b_d, c, d, dt, e, theta_m[0], np.zeros(n), "trapezoid"
        )
        res = theta - theta_m
        if not np.all(np.isfinite(res)):
            # an infinite value is never accepted by the line search, so a
            # zero gradient is a safe placeholder here
            return float("inf"), (np.zeros_like(p) if with_grad else None)
        total += float(np.vdot(res, res).real)
        if not with_grad:
            continue
        # s[k] = sum of residuals strictly after sample k
        tail = np.cumsum(res[::-1])[::-1]
        s = tail[1:]  # k = 0 .. N-2
        g_d += 2.0 * dt * (s @ e[:-1])
        if n:
            g_c += dt * (s @ (states[:-1] + states[1:]))
            s_pad = np.append(s, 0.0)
            s_sum = s_pad[:-1] + s_pad[1:]  # row j-1 <-> state x_j
            grad_x = dt * np.real(np.conj(s_sum)[:, None] * c[None, :])
            lam = lti_adjoint(np.ascontiguousarray(a_d.T), grad_x)
            g_a += lam.T @ states[:-1]
            g_b += lam.T @ e[:-1]
    if not with_grad:
        return total, None
    grad = np.concatenate((
        g_a.ravel(), g_b.ravel(), g_c.real, g_c.imag, g_d.real, g_d.imag,
    )) if n else np.concatenate((g_d.real, g_d.imag))
    return total, grad


def loss(
    model: HwDiscrete, records: list[_signals.DqSeries], setpoints: Setpoints
) -> float:
    """Summed squared complex-phase replay error over the records."""
    problem = _prepare(records, setpoints, model.n_ivars)
    if abs(model.dt - problem.dt) > 1e-12 * problem.dt:
        raise ValueError("model sample time does not match the records")
    value, _ = _loss_terms(pack_params(model), problem, with_grad=False)
    return value


def loss_gradient(
    model: HwDiscrete, records: list[_signals.DqSeries], setpoints: Setpoints
) -> np.ndarray:
    """Exact gradient of :func:`loss` in :func:`pack_params` layout."""
    problem = _prepare(records, setpoints, model.n_ivars)
    if abs(model.dt - problem.dt) > 1e-12 * problem.dt:
        raise ValueError("model sample time does not match the records")
    _, grad = _loss_terms(pack_params(model), problem, with_grad=True)
    return grad


# ---------------------------------------------------------------------------
# quasi-Newton refinement with snapshot-based model selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IdentConfig:
    """Knobs of the identification run."""

    n_ivars: int
    max_iters: int = 200
    n_restarts: int = 2
    restart_scale: float = 0.1
    loss_tolerance: float = 1e-8
    gradient_tolerance: float = 1e-12
    hankel_rows: int | None = None
    regularization: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_ivars < 0:
            raise ValueError("n_ivars must be non-negative")
        if self.max_iters < 0 or self.n_restarts < 0:
            raise ValueError("max_iters and n_restarts must be non-negative")
        if self.restart_scale < 0.0 or self.loss_tolerance <= 0.0:
            raise ValueError("restart_scale >= 0 and loss_tolerance > 0 required")
        if self.gradient_tolerance <= 0.0:
            raise ValueError("gradient_tolerance must be > 0")
        if self.hankel_rows is not None and self.hankel_rows < 2:
            raise ValueError("hankel_rows must be >= 2")
        if self.regularization < 0.0:
            raise ValueError("regularization must be >= 0")


@dataclass(frozen=True)
class RunTrace:
    """Loss trajectory of one optimizer run (start point + iterates)."""

    start: str
    losses: tuple[float, ...]
    stopped_early: bool


@dataclass(frozen=True)
class IdentResult:
    """Identified model plus everything needed to audit the fit."""

    model: HwNormalForm
    n_ivars: int
    dt: float
    train_loss: float
    val_r2: tuple[tuple[float, float], ...]  # (d, q) per validation record
    mean_val_r2: float
    runs: tuple[RunTrace, ...]
    selected_run: int
    selected_snapshot: int
    logm_fallback: bool
    init_stabilized: bool
    d_norm: float

    @property
    def discrete(self) -> HwDiscrete:
        return discretize(self.model, self.dt)


class _EarlyStop(Exception):
    pass


def _stabilized_params(
    vec: np.ndarray, n_ivars: int, dt: float, setpoints: Setpoints
) -> np.ndarray:
    """Project a parameter vector's A_d block back into the stable region.

    Perturbed restart points would otherwise frequently carry an unstable
    A_d, whose free-run loss is infinite and whose run dies immediately.
    """
    if n_ivars == 0:
        return vec
    model = unpack_params(vec, n_ivars, dt, setpoints)
    a_d, changed = reflect_unstable(model.a_d)
    if not changed:
        return vec
    out = np.array(vec, dtype=float)
    out[: n_ivars * n_ivars] = a_d.ravel()
    return out


def _minimize_with_snapshots(
    p0: np.ndarray, problem: _Problem, config: IdentConfig
) -> tuple[list[np.ndarray], bool]:
    """BFGS run returning every iterate (including the start and the end)."""
    snapshots = [np.array(p0, dtype=float)]
    recent: list[float] = []
    stopped = False
    # optimize the per-sample mean (same minimizer as the summed loss, but
    # the unit initial Hessian of BFGS takes sane first steps)
    scale = 1.0 / problem.n_samples
    reg = config.regularization

    def objective(p):
        value, grad = _loss_terms(p, problem, with_grad=True)
        if reg > 0.0:
            value = value + reg * float(p @ p)
            grad = grad + 2.0 * reg * p
        return scale * value, scale * grad

    def callback(p):
        snapshots.append(np.array(p, dtype=float))
        value, _ = _loss_terms(p, problem, with_grad=False)
        recent.append(value)
        if len(recent) > EARLY_STOP_WINDOW:
            recent.pop(0)
            first, last = recent[0], recent[-1]
            if first <= 0.0 or (first - last) / first < config.loss_tolerance:
                raise _EarlyStop

    try:
        result = scipy.optimize.minimize(
            objective,
            p0,
            jac=True,
            method="BFGS",
            callback=callback,
            options={
                "maxiter": config.max_iters,
                "gtol": config.gradient_tolerance,
            },
        )
        final = np.array(result.x, dtype=float)
    except _EarlyStop:
        stopped = True
        final = None
    if final is not None and (
        not snapshots or not np.array_equal(final, snapshots[-1])
    ):
        snapshots.append(final)
    return snapshots, stopped


def _mean_val_r2(
    disc: HwDiscrete, problem: _Problem
) -> tuple[float, tuple[tuple[float, float], ...]]:
    """Mean of per-record d/q R^2 of the open-loop voltage replay."""
    scores = []
    for theta_m, e in zip(problem.thetas, problem.errors):
        theta, _, _ = _open_loop_arrays(
            disc.a_d, disc.b_d, disc.c, disc.d, disc.dt, e, theta_m[0],
            np.zeros(disc.n_ivars), "trapezoid",
        )
        v_meas = np.exp(theta_m)
        if np.all(np.isfinite(theta)):
            with np.errstate(over="ignore", invalid="ignore"):
                v_pred = np.exp(theta)
        else:
            v_pred = np.full_like(v_meas, np.nan)
        scores.append((
            r_squared(v_meas.real, np.where(np.isfinite(v_pred), v_pred, np.nan).real),
            r_squared(v_meas.imag, np.where(np.isfinite(v_pred), v_pred, np.nan).imag),
        ))
    mean = float(np.mean([0.5 * (a + b) for a, b in scores]))
    return mean, tuple(scores)


def identify(
    train: Mapping[str, _signals.DqSeries] | Sequence[_signals.DqSeries],
    validation: Mapping[str, _signals.DqSeries] | Sequence[_signals.DqSeries],
    setpoints: Setpoints,
    config: IdentConfig,
) -> IdentResult:
    """Fit the normal-form model of the requested order to the records.

    A subspace stage fits a state-space model to the one-step phase
    increments (causally consistent with the replay rule the loss uses);
    an alternating exact least-squares pass then refits the I/O maps on
    the phase loss itself (a subspace estimate that is fine
    sample-to-sample can still drift badly in free-run phase); quasi-Newton
    refinement minimizes the exact phase loss from there.  Restarts perturb
    the refined parameters (projected back to stability).  Of every iterate
    visited by any run, the one with the best mean validation R^2 wins
    (ties go to the earliest); with ``max_iters=0`` the subspace
    initialization itself is returned.  Model selection against validation
    data uses the model after the discrete-to-continuous round trip,
    i.e. exactly what gets serialized.
    """
    if len(validation) == 0:
        raise ValueError("need at least one validation record")
    n = config.n_ivars
    problem = _prepare(train, setpoints, n)
    val_problem = _prepare(validation, setpoints, n)
    if abs(val_problem.dt - problem.dt) > 1e-12 * problem.dt:
        raise ValueError("training and validation sample times differ")

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        init = _increment_init(problem, config.hankel_rows)
    init_stabilized = False
    for w in caught:
        if "unstable" in str(w.message):
            init_stabilized = True
        else:
            warnings.warn_explicit(
                w.message, w.category, w.filename, w.lineno
            )
    refined = refine_io_maps(problem, init)

    p0 = pack_params(refined)
    runs: list[RunTrace] = []
    best = None  # (mean_r2, run, snapshot, params)
    all_snapshots = [("subspace", [pack_params(init)], False)]
    if config.max_iters == 0:
        # Degenerate configuration: return the subspace initialization
        # itself (the only candidate), untouched by any refinement.
        pass
    else:
        rng = substream(config.seed, "identify-restarts")
        for r in range(config.n_restarts + 1):
            if r == 0:
                start, label = p0, "refined"
            else:
                bump = config.restart_scale * (1.0 + np.abs(p0))
                start = p0 + bump * rng.standard_normal(p0.shape)
                start = _stabilized_params(start, n, problem.dt, setpoints)
                label = f"perturbed-{r}"
            snaps, stopped = _minimize_with_snapshots(
                start, problem, config
            )
            all_snapshots.append((label, snaps, stopped))

    for run_idx, (label, snaps, stopped) in enumerate(all_snapshots):
        losses = []
        for snap_idx, p in enumerate(snaps):
            value, _ = _loss_terms(p, problem, with_grad=False)
            losses.append(value)
            disc = unpack_params(p, n, problem.dt, setpoints)
            try:
                mean_r2, _ = _mean_val_r2(disc, val_problem)
            except ValueError:
                mean_r2 = float("-inf")
            if not np.isfinite(mean_r2):
                mean_r2 = float("-inf")
            if best is None or mean_r2 > best[0]:
                best = (mean_r2, run_idx, snap_idx, p)
        runs.append(RunTrace(start=label, losses=tuple(losses), stopped_early=stopped))

    assert best is not None
    _, best_run, best_snap, best_p = best
    best_disc = unpack_params(best_p, n, problem.dt, setpoints)
    cont, fallback = to_continuous(best_disc)

    # Score exactly what will be serialized: the continuous model taken
    # back through discretization.
    round_trip = discretize(cont, problem.dt)
    mean_r2, per_record = _mean_val_r2(round_trip, val_problem)
    train_loss, _ = _loss_terms(pack_params(round_trip), problem, with_grad=False)

    return IdentResult(
        model=cont,
        n_ivars=n,
        dt=problem.dt,
        train_loss=train_loss,
        val_r2=per_record,
        mean_val_r2=mean_r2,
        runs=tuple(runs),
        selected_run=best_run,
        selected_snapshot=best_snap,
        logm_fallback=fallback,
        init_stabilized=init_stabilized,
        d_norm=float(np.linalg.norm(best_disc.d)),
    )


@dataclass(frozen=True)
class SweepResult:
    """Order sweep outcome: every fitted order plus the selected one."""

    results: dict[int, IdentResult]
    selected_order: int

    @property
    def mean_val_r2(self) -> dict[int, float]:
        return {n: r.mean_val_r2 for n, r in self.results.items()}


def order_sweep(
    train: Mapping[str, _signals.DqSeries] | Sequence[_signals.DqSeries],
    validation: Mapping[str, _signals.DqSeries] | Sequence[_signals.DqSeries],
    setpoints: Setpoints,
    orders: tuple[int, ...] = (0, 1, 2, 3, 4),
    config: IdentConfig | None = None,
    epsilon_select: float = EPSILON_SELECT,
) -> SweepResult:
    """Fit every order and pick the smallest statistically adequate one.

    Selection rule: the smallest order whose mean validation R^2 comes
    within ``epsilon_select`` of the best order's.
    """
    if len(orders) == 0 or len(set(orders)) != len(orders):
        raise ValueError("orders must be a non-empty set of distinct integers")
    base = config if config is not None else IdentConfig(n_ivars=0)
    results: dict[int, IdentResult] = {}
    for n in sorted(orders):
        cfg = dataclasses.replace(base, n_ivars=n)
        results[n] = identify(train, validation, setpoints, cfg)
    best_r2 = max(r.mean_val_r2 for r in results.values())
    selected = min(
        n for n, r in results.items() if r.mean_val_r2 >= best_r2 - epsilon_select
    )
    return SweepResult(results=results, selected_order=selected)


# ---------------------------------------------------------------------------
# closed-loop stability audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    """Linearized closed-loop check of the identified model on a network."""

    has_equilibrium: bool
    eigenvalues: tuple[complex, ...]
    spectral_abscissa: float
    is_stable: bool


def closed_loop_stability(
    model: HwNormalForm,
    network,
    *,
    theta_guess: complex = 0j,
) -> StabilityReport:
    """Eigenvalues of the model/network interconnection at its equilibrium.

    Uses a forward-difference Jacobian of the continuous closed-loop vector
    field in (Re Theta, Im Theta, x) coordinates.  A missing equilibrium
    yields an unstable report with no eigenvalues.
    """
    from . import plants as _plants
    from .normalform import equilibrium as _nf_equilibrium

    found = _nf_equilibrium(model, network, theta_guess=theta_guess)
    if found is None:
        return StabilityReport(
            has_equilibrium=False, eigenvalues=(), spectral_abscissa=float("inf"),
            is_stable=False,
        )
    theta_eq, x_eq = found
    n = model.n_ivars
    sp = model.setpoints

    def field(z: np.ndarray) -> np.ndarray:
        theta = z[0] + 1j * z[1]
        x = z[2:]
        v = np.exp(theta)
        i = _plants.couple(v, network, 0.0)
        s = v * np.conj(i)
        e = np.array([s.real - sp.p, s.imag - sp.q, abs(v) ** 2 - sp.v ** 2])
        eta = (model.c @ x if n else 0.0) + model.d @ e
        dx = model.a @ x + model.b @ e if n else np.zeros(0)
        return np.concatenate(([eta.real, eta.imag], dx))

    z0 = np.concatenate(([theta_eq.real, theta_eq.imag], x_eq))
    f0 = field(z0)
    dim = len(z0)
    jac = np.empty((dim, dim))
    h = 1e-7
    for j in range(dim):
        dz = z0.copy()
        dz[j] += h
        jac[:, j] = (field(dz) - f0) / h
    vals = np.linalg.eigvals(jac)
    abscissa = float(vals.real.max()) if dim else 0.0
    return StabilityReport(
        has_equilibrium=True,
        eigenvalues=tuple(sorted(vals, key=lambda z: (z.real, z.imag))),
        spectral_abscissa=abscissa,
        is_stable=bool(abscissa < 1e-6),
    )
