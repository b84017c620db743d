"""Shared fixtures: reference datasets, identification sweeps, generators.

The expensive artifacts (simulated datasets and order sweeps) are built
once per session and treated as read-only by every consumer.  All of them
flow from one root seed so the whole suite is reproducible.
"""

from __future__ import annotations

import dataclasses
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

import gfident as gf
from gfident.seeding import substream_seed

ROOT_SEED = 42

#: Hand-picked two-state generator: a damped rotation pair (poles at
#: -15 +/- 30j rad/s) whose oscillatory impulse response no single-state
#: model can reproduce, with DC feedback gains shaped like a droop law
#: (frequency falls with active-power error, magnitude with reactive and
#: squared-magnitude error) so the closed loop against a stiff bus is
#: well damped.
HW2_A = np.array([[-15.0, 30.0], [-30.0, -15.0]])
HW2_B = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.5]])
HW2_C = np.array([60.0 - 200.0j, 30.0 + 135.5j])
HW2_D = np.array([0.0j, -3.0 + 3.53j, -11.0 + 1.763j])


def matched_plant(kind: str):
    """Reference plant dispatched to the default network's natural flow."""
    network = gf.StiffBus()
    if kind == "droop":
        params = gf.DroopParams(tau_act=0.0)
    else:
        params = gf.DvocParams()
    q = gf.matched_reactive_setpoint(params.p_set, params.v_set, network)
    params = dataclasses.replace(params, q_set=q)
    plant = gf.DroopPlant(params) if kind == "droop" else gf.DvocPlant(params)
    return network, plant


def _bundle(kind: str, include_ood: bool) -> SimpleNamespace:
    network, plant = matched_plant(kind)
    scens = gf.default_scenarios(
        instances=3,
        seed=ROOT_SEED,
        slowest_time_constant=plant.slowest_time_constant,
    )
    if include_ood:
        scens.append(gf.ood_load_step_scenario(
            "ood-load-step", plant,
            seed=substream_seed(ROOT_SEED, "ood-load-step"),
        ))
        scens.append(gf.ood_islanding_scenario(
            "ood-islanding",
            seed=substream_seed(ROOT_SEED, "ood-islanding"),
        ))
    dataset = gf.build_dataset(
        scens, plant, network=network,
        fractions=(0.7, 0.2, 0.1), seed=ROOT_SEED,
    )
    return SimpleNamespace(
        network=network,
        plant=plant,
        scenarios=scens,
        dataset=dataset,
        train=dataset.partition_records("train"),
        validation=dataset.partition_records("validation"),
        test=dataset.partition_records("test"),
    )


def _timed_sweep(bundle: SimpleNamespace, orders: tuple[int, ...]):
    config = gf.IdentConfig(n_ivars=0, seed=ROOT_SEED)
    start = time.monotonic()
    sweep = gf.order_sweep(
        bundle.train, bundle.validation, bundle.dataset.setpoints,
        orders=orders, config=config,
    )
    return sweep, time.monotonic() - start


@pytest.fixture(scope="session")
def droop_bundle() -> SimpleNamespace:
    return _bundle("droop", include_ood=True)


@pytest.fixture(scope="session")
def dvoc_bundle() -> SimpleNamespace:
    return _bundle("dvoc", include_ood=False)


@pytest.fixture(scope="session")
def droop_sweep(droop_bundle):
    """(SweepResult over orders 1..6, elapsed seconds) for the droop data."""
    return _timed_sweep(droop_bundle, (1, 2, 3, 4, 5, 6))


@pytest.fixture(scope="session")
def dvoc_sweep(dvoc_bundle):
    """(SweepResult over orders 1..6, elapsed seconds) for the dVOC data."""
    return _timed_sweep(dvoc_bundle, (1, 2, 3, 4, 5, 6))


@pytest.fixture(scope="session")
def hw2_bundle() -> SimpleNamespace:
    """Records generated by the known two-state normal form vs a stiff bus."""
    network = gf.StiffBus()
    q = gf.matched_reactive_setpoint(0.5, 1.0, network)
    sp = gf.Setpoints(p=0.5, q=q, v=1.0)
    generator = gf.HwNormalForm(
        n_ivars=2, a=HW2_A, b=HW2_B, c=HW2_C, d=HW2_D, setpoints=sp,
    )
    gen_dt = gf.discretize(generator, 1e-3)
    # Exact equilibrium: matched setpoints put zero error at the power-flow
    # angle, so the phase alone pins the operating point.
    theta0 = 1j * math.asin(sp.p / abs(network.y))

    records = {}
    by_class: dict[str, list[str]] = {}
    scens = gf.default_scenarios(instances=3, seed=ROOT_SEED)
    for sc in scens:
        records[sc.name] = gf.simulate_closed_loop(
            gen_dt, network, sc.duration, theta0=theta0, events=sc.events,
        )
        by_class.setdefault(sc.scenario_class, []).append(sc.name)
    split = gf.split_records(by_class, fractions=(0.7, 0.2, 0.1), seed=ROOT_SEED)
    return SimpleNamespace(
        network=network,
        setpoints=sp,
        generator=generator,
        generator_dt=gen_dt,
        theta0=theta0,
        records=records,
        split=split,
        train={n: records[n] for n in split["train"]},
        validation={n: records[n] for n in split["validation"]},
        test={n: records[n] for n in split["test"]},
    )


@pytest.fixture(scope="session")
def hw2_sweep(hw2_bundle):
    """(SweepResult over orders 1..3, elapsed seconds) for generated data."""
    config = gf.IdentConfig(n_ivars=0, seed=ROOT_SEED)
    start = time.monotonic()
    sweep = gf.order_sweep(
        hw2_bundle.train, hw2_bundle.validation, hw2_bundle.setpoints,
        orders=(1, 2, 3), config=config,
    )
    return sweep, time.monotonic() - start
