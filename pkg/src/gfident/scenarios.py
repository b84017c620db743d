"""Excitation scenarios and dataset assembly.

A scenario is a deterministic script of network events applied to a plant
coupled to a stiff bus (or, for the out-of-distribution cases, a resistive
load or a two-inverter microgrid).  ``build_dataset`` simulates every
scenario, downsamples the records to the identification rate, checks that
training records actually excite all three error channels, and splits the
in-distribution records into train/validation/test partitions with a
deterministic, stratified, largest-remainder rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import plants as _plants
from . import signals as _signals
from .normalform import Setpoints, error_series
from .seeding import substream, substream_seed

#: Partition names in priority order (used for rounding tie-breaks).
PARTITIONS = ("train", "validation", "test")

#: In-distribution scenario classes used for identification.
TRAINING_CLASSES = ("magnitude", "frequency", "rapid")

#: Out-of-distribution scenario classes (never partitioned).
OOD_CLASSES = ("load_step", "islanding")

#: Minimum per-channel variance of the error signal on a training record.
EXCITATION_FLOOR = 1e-8

#: Actuation lag (s) given to ideal-source plants for micro-grid runs only.
MICROGRID_FALLBACK_LAG = 0.002


@dataclass(frozen=True)
class Scenario:
    """A named, scripted excitation experiment.

    ``events`` is a tuple of ``(time, changes)`` pairs consumed by the
    integrator; ``network_kind`` selects the boundary circuit ("stiff",
    "load" or "microgrid").  ``extras`` carries network-kind specific
    scalars (initial load conductance, grid import level, ...).
    """

    name: str
    scenario_class: str
    duration: float
    events: tuple[tuple[float, dict], ...] = ()
    network_kind: str = "stiff"
    seed: int | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.scenario_class not in TRAINING_CLASSES + OOD_CLASSES:
            raise ValueError(f"unknown scenario class {self.scenario_class!r}")
        if not self.duration > 0.0:
            raise ValueError("scenario duration must be positive")
        for t_event, changes in self.events:
            if not 0.0 <= t_event <= self.duration:
                raise ValueError(
                    f"event at t={t_event} outside scenario duration"
                )
            if not isinstance(changes, dict) or not changes:
                raise ValueError("event changes must be a non-empty mapping")

    @property
    def is_ood(self) -> bool:
        return self.scenario_class in OOD_CLASSES


def _alternating_signs(count: int, rng: np.random.Generator) -> np.ndarray:
    """Random +/-1 pattern that never repeats the same sign twice."""
    signs = np.empty(count)
    signs[0] = rng.choice((-1.0, 1.0))
    for k in range(1, count):
        signs[k] = -signs[k - 1] if rng.random() < 0.75 else signs[k - 1]
    return signs


def magnitude_step_scenario(
    name: str,
    *,
    step: float = 0.05,
    dwell: float = 2.0,
    cycles: int = 5,
    seed: int = 0,
    slowest_time_constant: float | None = None,
) -> Scenario:
    """Slack-magnitude staircase: excursions of ``+/-step`` with recovery.

    Each cycle raises (or lowers) the stiff-bus magnitude for one dwell
    period and then returns to nominal, so the plant re-settles between
    excursions.  Magnitudes are kept within the [0.8, 1.2] pu guard band.
    """
    if not 0.0 < step <= 0.2:
        raise ValueError("magnitude step must lie in (0, 0.2] pu")
    if dwell <= 0.0 or cycles < 1:
        raise ValueError("dwell must be positive and cycles >= 1")
    if slowest_time_constant is not None and dwell < 10.0 * slowest_time_constant:
        import warnings

        warnings.warn(
            "dwell shorter than 10x the slowest plant time constant; "
            "segments may not settle",
            stacklevel=2,
        )
    rng = substream(seed, f"scenario:{name}")
    signs = _alternating_signs(cycles, rng)
    levels = [1.0]
    for s in signs:
        levels.extend((1.0 + s * step, 1.0))
    for level in levels:
        if not 0.8 <= level <= 1.2:
            raise ValueError(f"slack magnitude {level} outside [0.8, 1.2] pu")
    events = tuple(
        (k * dwell, {"v_slack": level})
        for k, level in enumerate(levels)
        if k > 0 and level != levels[k - 1]
    )
    return Scenario(
        name=name,
        scenario_class="magnitude",
        duration=len(levels) * dwell,
        events=events,
        seed=seed,
    )


def frequency_step_scenario(
    name: str,
    *,
    step_hz: float = 0.2,
    dwell: float = 2.0,
    cycles: int = 5,
    seed: int = 0,
) -> Scenario:
    """Slack-frequency staircase: ``+/-step_hz`` excursions with recovery."""
    if not 0.0 < step_hz <= 1.0:
        raise ValueError("frequency step must lie in (0, 1] Hz")
    if dwell <= 0.0 or cycles < 1:
        raise ValueError("dwell must be positive and cycles >= 1")
    rng = substream(seed, f"scenario:{name}")
    signs = _alternating_signs(cycles, rng)
    devs = [0.0]
    for s in signs:
        devs.extend((s * step_hz, 0.0))
    events = tuple(
        (k * dwell, {"freq_dev": dev})
        for k, dev in enumerate(devs)
        if k > 0 and dev != devs[k - 1]
    )
    return Scenario(
        name=name,
        scenario_class="frequency",
        duration=len(devs) * dwell,
        events=events,
        seed=seed,
    )


def rapid_small_changes_scenario(
    name: str,
    *,
    duration: float = 60.0,
    step_period: float = 1.0,
    magnitude_range: float = 0.01,
    frequency_range_hz: float = 0.1,
    seed: int = 0,
) -> Scenario:
    """Random small simultaneous magnitude/frequency moves every period.

    Draws are uniform in ``+/-magnitude_range`` pu and
    ``+/-frequency_range_hz`` Hz from a seeded stream, so the scenario is
    reproducible from its seed alone.  The step period should exceed the
    plant settling time only loosely: the point of this class is sustained,
    overlapping transients.
    """
    if duration <= 0.0 or step_period <= 0.0:
        raise ValueError("duration and step period must be positive")
    if magnitude_range < 0.0 or frequency_range_hz < 0.0:
        raise ValueError("excitation ranges must be non-negative")
    rng = substream(seed, f"scenario:{name}")
    n_steps = int(math.floor(duration / step_period))
    events = []
    for k in range(n_steps):
        changes = {
            "v_slack": 1.0 + rng.uniform(-magnitude_range, magnitude_range),
            "freq_dev": rng.uniform(-frequency_range_hz, frequency_range_hz),
        }
        events.append((k * step_period, changes))
    return Scenario(
        name=name,
        scenario_class="rapid",
        duration=duration,
        events=tuple(events),
        seed=seed,
    )


def ood_load_step_scenario(
    name: str,
    plant: _plants.DroopPlant | _plants.DvocPlant,
    *,
    step_fraction: float = 0.15,
    n_steps: int = 3,
    dwell: float = 2.0,
    seed: int = 0,
) -> Scenario:
    """Islanded resistive load whose conductance rises in discrete steps.

    The initial conductance is tuned so the plant starts at an exact
    operating point (load power equals the power the plant would deliver
    there); each step then raises the conductance by ``step_fraction``,
    pulling the frequency down through the droop/dVOC power feedback.
    """
    if not 0.0 < step_fraction <= 0.5 or n_steps < 1:
        raise ValueError("step_fraction must lie in (0, 0.5] and n_steps >= 1")
    params = plant.params
    if isinstance(plant, _plants.DroopPlant):
        v_ref = params.v_set + params.k_q * params.q_set
        g0 = params.p_set / (v_ref * v_ref)
    else:
        if params.q_set != 0.0:
            raise ValueError(
                "load-step scenario for a dVOC plant requires q_set = 0 "
                "(a conductance draws no reactive power)"
            )
        g0 = params.p_set / (params.v_set * params.v_set)
    events = tuple(
        ((k + 1) * dwell, {"g_load": g0 * (1.0 + step_fraction) ** (k + 1)})
        for k in range(n_steps)
    )
    return Scenario(
        name=name,
        scenario_class="load_step",
        duration=(n_steps + 2) * dwell,
        events=events,
        network_kind="load",
        seed=seed,
        extras={"g0": g0},
    )


def ood_islanding_scenario(
    name: str,
    *,
    import_power: float = 0.3,
    t_open: float = 2.0,
    duration: float = 6.0,
    seed: int = 0,
) -> Scenario:
    """Two identical inverters on a common bus, grid breaker opens.

    Before the event the stiff grid supplies ``import_power`` pu on top of
    the inverter setpoints; after the breaker opens the pair must absorb
    the imbalance, settling to a common frequency offset determined by the
    droop gains.
    """
    if not 0.0 < t_open < duration:
        raise ValueError("breaker opening time must lie inside the scenario")
    if import_power < 0.0:
        raise ValueError("import power must be non-negative")
    return Scenario(
        name=name,
        scenario_class="islanding",
        duration=duration,
        events=((t_open, {"breaker": False}),),
        network_kind="microgrid",
        seed=seed,
        extras={"import_power": import_power, "t_open": t_open},
    )


def default_scenarios(
    *,
    instances: int = 3,
    seed: int = 0,
    slowest_time_constant: float | None = None,
) -> list[Scenario]:
    """Standard identification protocol: ``instances`` of each training class."""
    out: list[Scenario] = []
    for i in range(instances):
        out.append(
            magnitude_step_scenario(
                f"magnitude-{i:02d}",
                seed=substream_seed(seed, f"magnitude-{i:02d}"),
                slowest_time_constant=slowest_time_constant,
            )
        )
        out.append(
            frequency_step_scenario(
                f"frequency-{i:02d}",
                seed=substream_seed(seed, f"frequency-{i:02d}"),
            )
        )
        out.append(
            rapid_small_changes_scenario(
                f"rapid-{i:02d}",
                seed=substream_seed(seed, f"rapid-{i:02d}"),
            )
        )
    return out


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RecordMeta:
    """Bookkeeping for one simulated record."""

    name: str
    scenario_class: str
    partition: str  # train | validation | test | ood
    duration: float
    seed: int | None


@dataclass(frozen=True)
class Dataset:
    """Simulated records plus the split used for identification."""

    dt: float
    setpoints: Setpoints
    records: dict[str, _signals.DqSeries]
    meta: dict[str, RecordMeta]
    split: dict[str, tuple[str, ...]]
    ood: tuple[str, ...]

    def partition_records(self, partition: str) -> dict[str, _signals.DqSeries]:
        if partition == "ood":
            names: tuple[str, ...] = self.ood
        else:
            names = self.split[partition]
        return {name: self.records[name] for name in names}


def _largest_remainder_counts(total: int, fractions: tuple[float, ...]) -> list[int]:
    """Integer partition sizes from fractions, largest remainder first.

    Remainder ties are broken by partition priority order (train before
    validation before test).
    """
    raw = [total * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    shortfall = total - sum(counts)
    order = sorted(
        range(len(fractions)), key=lambda j: (-(raw[j] - counts[j]), j)
    )
    for j in order[:shortfall]:
        counts[j] += 1
    return counts


def split_records(
    names_by_class: dict[str, list[str]],
    fractions: tuple[float, float, float] = (0.7, 0.2, 0.1),
    seed: int = 0,
) -> dict[str, tuple[str, ...]]:
    """Deterministic stratified split of record names into partitions.

    Partition sizes follow largest-remainder rounding of the global record
    count.  Every scenario class is guaranteed at least one record in every
    partition with a nonzero target; remaining records fill the partitions
    with the largest outstanding deficit.  Raises ``ValueError`` when a
    class has fewer records than there are nonzero partitions.
    """
    if len(fractions) != len(PARTITIONS):
        raise ValueError("fractions must give (train, validation, test)")
    if any(f < 0.0 for f in fractions):
        raise ValueError("split fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")

    total = sum(len(v) for v in names_by_class.values())
    targets = _largest_remainder_counts(total, tuple(fractions))
    nonzero = [j for j in range(len(PARTITIONS)) if targets[j] > 0]
    for cls, names in sorted(names_by_class.items()):
        if len(names) < len(nonzero):
            raise ValueError(
                f"scenario class {cls!r} has {len(names)} records but the "
                f"split needs at least {len(nonzero)} (one per nonzero "
                "partition); add scenarios or change the fractions"
            )

    rng = substream(seed, "dataset-split")
    assigned: dict[str, list[str]] = {p: [] for p in PARTITIONS}
    counts = [0, 0, 0]
    leftovers: list[str] = []
    for cls in sorted(names_by_class):
        names = sorted(names_by_class[cls])
        perm = rng.permutation(len(names))
        shuffled = [names[k] for k in perm]
        for slot, j in enumerate(nonzero):
            assigned[PARTITIONS[j]].append(shuffled[slot])
            counts[j] += 1
        leftovers.extend(shuffled[len(nonzero):])

    for name in leftovers:
        deficits = [targets[j] - counts[j] for j in range(len(PARTITIONS))]
        j = max(range(len(PARTITIONS)), key=lambda k: (deficits[k], -k))
        assigned[PARTITIONS[j]].append(name)
        counts[j] += 1

    return {p: tuple(sorted(assigned[p])) for p in PARTITIONS}


def _initial_element(
    scenario: Scenario, base: _plants.StiffBus
) -> _plants.StiffBus:
    """Stiff-bus element with any t=0 scripted changes already applied."""
    element = base
    for t_event, changes in scenario.events:
        if t_event == 0.0:
            element = _plants.apply_element_event(element, changes, 0.0)
    return element


def simulate_scenario(
    scenario: Scenario,
    plant: _plants.DroopPlant | _plants.DvocPlant,
    *,
    network: _plants.StiffBus | None = None,
    dt_sim: float = 5e-5,
    dt_record: float = 1e-3,
) -> _signals.DqSeries:
    """Run one scenario and return the (not yet downsampled) record."""
    network = network if network is not None else _plants.StiffBus()

    if scenario.network_kind == "stiff":
        start = _initial_element(scenario, network)
        x0 = _plants.equilibrium(plant, start, plant.flat_state())
        return _plants.integrate(
            plant,
            network,
            scenario.duration,
            dt_sim=dt_sim,
            dt_record=dt_record,
            events=scenario.events,
            x0=x0,
        )

    if scenario.network_kind == "load":
        g0 = float(scenario.extras["g0"])
        load = _plants.ResistiveLoad(g=g0)
        x0 = _load_equilibrium(plant, g0)
        return _plants.integrate(
            plant,
            load,
            scenario.duration,
            dt_sim=dt_sim,
            dt_record=dt_record,
            events=scenario.events,
            x0=x0,
        )

    if scenario.network_kind == "microgrid":
        series, _ = simulate_islanding(
            scenario, plant, network=network, dt_sim=dt_sim, dt_record=dt_record
        )
        return series

    raise ValueError(f"unknown network kind {scenario.network_kind!r}")


def _load_equilibrium(
    plant: _plants.DroopPlant | _plants.DvocPlant, g: float
) -> np.ndarray:
    """Operating point on a resistive load tuned to the plant setpoint.

    Such networks are rotationally symmetric, so a true fixed point exists
    only when the load power matches the plant's zero-frequency-offset
    delivery; the scenario constructor guarantees that for the initial
    conductance.
    """
    params = plant.params
    if isinstance(plant, _plants.DroopPlant):
        v_ref = params.v_set + params.k_q * params.q_set
        if abs(g * v_ref * v_ref - params.p_set) > 1e-9:
            raise ValueError("initial load conductance is not tuned to the setpoint")
        core = np.array([0.0, params.p_set, 0.0])
        if params.tau_act > 0.0:
            return np.concatenate((core, [v_ref, 0.0]))
        return core
    if abs(g * params.v_set**2 - params.p_set) > 1e-9:
        raise ValueError("initial load conductance is not tuned to the setpoint")
    core = np.array([params.v_set, 0.0])
    if params.tau_act > 0.0:
        return np.concatenate((core, [params.v_set, 0.0]))
    return core


def build_microgrid(
    scenario: Scenario,
    plant: _plants.DroopPlant,
    *,
    network: _plants.StiffBus | None = None,
) -> _plants.MicroGrid:
    """Two-inverter microgrid sized for the scenario's grid import."""
    network = network if network is not None else _plants.StiffBus()
    import_power = float(scenario.extras.get("import_power", 0.3))
    params = plant.params
    # Conductance sized at nominal bus voltage; the stiff grid holds the bus
    # close to 1 pu before the breaker opens.
    g_load = 2.0 * params.p_set + import_power
    # The inverter feeders keep their short-cable defaults; only the tie
    # to the auxiliary grid inherits the scenario network's line.
    return _plants.MicroGrid(
        g_load=g_load,
        y_grid=network.y,
        slack_mag=network.v_mag,
        slack_phase0=network.phase0,
        slack_freq_dev=network.freq_dev,
        slack_t_ref=network.t_ref,
        breaker_closed=True,
    )


def simulate_islanding(
    scenario: Scenario,
    plant: _plants.DroopPlant,
    *,
    network: _plants.StiffBus | None = None,
    dt_sim: float = 5e-5,
    dt_record: float = 1e-3,
) -> tuple[_signals.DqSeries, _signals.DqSeries]:
    """Run the islanding scenario; returns both inverters' records.

    The micro-grid closure needs the terminal voltages as states, so an
    ideal-source plant (tau_act = 0) is augmented with a small actuation
    lag for this run only.
    """
    if not isinstance(plant, _plants.DroopPlant):
        raise TypeError("the islanding scenario is defined for droop plants")
    if plant.params.tau_act <= 0.0:
        plant = _plants.DroopPlant(
            replace(plant.params, tau_act=MICROGRID_FALLBACK_LAG),
            frame_omega=plant.frame_omega,
        )
    grid = build_microgrid(scenario, plant, network=network)
    guess = np.concatenate((plant.flat_state(), plant.flat_state()))
    x0 = _plants.microgrid_equilibrium(plant, plant, grid, guess)
    return _plants.integrate_microgrid(
        plant,
        plant,
        grid,
        scenario.duration,
        dt_sim=dt_sim,
        dt_record=dt_record,
        events=scenario.events,
        x0=x0,
    )


def build_dataset(
    scenarios: list[Scenario],
    plant: _plants.DroopPlant | _plants.DvocPlant,
    *,
    setpoints: Setpoints | None = None,
    network: _plants.StiffBus | None = None,
    fractions: tuple[float, float, float] = (0.7, 0.2, 0.1),
    seed: int = 0,
    dt_sim: float = 5e-5,
    dt_record: float = 1e-3,
    excitation_floor: float = EXCITATION_FLOOR,
) -> Dataset:
    """Simulate all scenarios and assemble the identification dataset.

    In-distribution records are split train/validation/test (stratified by
    scenario class); out-of-distribution records are kept aside under
    ``dataset.ood``.  Raises ``ValueError`` if any training record fails to
    excite all three error channels above ``excitation_floor``.
    """
    if len(scenarios) == 0:
        raise ValueError("need at least one scenario")
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        raise ValueError("scenario names must be unique")
    if setpoints is None:
        params = plant.params
        setpoints = Setpoints(p=params.p_set, q=params.q_set, v=params.v_set)

    records: dict[str, _signals.DqSeries] = {}
    meta: dict[str, RecordMeta] = {}
    names_by_class: dict[str, list[str]] = {}
    ood_names: list[str] = []
    for scenario in scenarios:
        series = simulate_scenario(
            scenario, plant, network=network, dt_sim=dt_sim, dt_record=dt_record
        )
        records[scenario.name] = series
        if scenario.is_ood:
            ood_names.append(scenario.name)
        else:
            names_by_class.setdefault(scenario.scenario_class, []).append(
                scenario.name
            )

    if names_by_class:
        split = split_records(names_by_class, fractions, seed)
    else:
        split = {p: () for p in PARTITIONS}

    partition_of = {"": ""}
    for part, part_names in split.items():
        for name in part_names:
            partition_of[name] = part
    for name in ood_names:
        partition_of[name] = "ood"

    for scenario in scenarios:
        meta[scenario.name] = RecordMeta(
            name=scenario.name,
            scenario_class=scenario.scenario_class,
            partition=partition_of[scenario.name],
            duration=scenario.duration,
            seed=scenario.seed,
        )

    for name in split["train"]:
        err = error_series(records[name], setpoints)
        variances = err.e.var(axis=0)
        for channel, var in zip(("P", "Q", "V"), variances):
            if var <= excitation_floor:
                raise ValueError(
                    f"training record {name!r} under-excites the {channel} "
                    f"error channel (variance {var:.3e} <= floor "
                    f"{excitation_floor:.1e}); strengthen the scenario"
                )

    return Dataset(
        dt=dt_record,
        setpoints=setpoints,
        records=records,
        meta=meta,
        split=split,
        ood=tuple(sorted(ood_names)),
    )
