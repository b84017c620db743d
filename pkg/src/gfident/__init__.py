"""Gray-box identification of grid-forming inverters.

Fits low-order dynamic models of inverter terminal behavior from voltage
and current time series.  The model lives in complex-phase coordinates
(log-magnitude plus angle); its input is the deviation of active power,
reactive power, and squared voltage magnitude from their setpoints; its
output is the complex frequency that drives the phase.  The package also
ships reference droop and dispatchable-virtual-oscillator simulators for
generating benchmark data, plus a CLI covering the complete pipeline:
simulate -> identify -> evaluate -> closed-loop replay -> report.
"""

from .metrics import EvalReport, evaluate, r_squared, spectrum
from .normalform import (
    HwDiscrete,
    HwNormalForm,
    Setpoints,
    discretize,
    error_coordinates,
    markov_parameters,
    simulate_closed_loop,
    simulate_open_loop,
    to_continuous,
)
from .plants import (
    DroopParams,
    DroopPlant,
    DvocParams,
    DvocPlant,
    Line,
    MicroGrid,
    NumericalDivergence,
    ResistiveLoad,
    StiffBus,
    droop_rhs,
    dvoc_rhs,
    equilibrium,
    integrate,
    matched_reactive_setpoint,
)
from .scenarios import (
    Dataset,
    Scenario,
    build_dataset,
    default_scenarios,
    frequency_step_scenario,
    magnitude_step_scenario,
    ood_islanding_scenario,
    ood_load_step_scenario,
    rapid_small_changes_scenario,
    split_records,
)
from .signals import (
    DqSeries,
    PhaseSeries,
    complex_power,
    downsample,
    inverse_park,
    park_transform,
    to_phase,
)
from .sysid import (
    IdentConfig,
    IdentResult,
    StabilityReport,
    SweepResult,
    closed_loop_stability,
    identify,
    order_sweep,
    refine_io_maps,
    subspace_init,
)

__version__ = "0.1.0"

__all__ = [
    "DqSeries",
    "PhaseSeries",
    "Setpoints",
    "HwNormalForm",
    "HwDiscrete",
    "DroopParams",
    "DroopPlant",
    "DvocParams",
    "DvocPlant",
    "StiffBus",
    "ResistiveLoad",
    "Line",
    "MicroGrid",
    "NumericalDivergence",
    "Scenario",
    "Dataset",
    "IdentConfig",
    "IdentResult",
    "SweepResult",
    "StabilityReport",
    "EvalReport",
    "park_transform",
    "inverse_park",
    "complex_power",
    "to_phase",
    "downsample",
    "error_coordinates",
    "discretize",
    "to_continuous",
    "markov_parameters",
    "simulate_open_loop",
    "simulate_closed_loop",
    "integrate",
    "droop_rhs",
    "dvoc_rhs",
    "equilibrium",
    "matched_reactive_setpoint",
    "magnitude_step_scenario",
    "frequency_step_scenario",
    "rapid_small_changes_scenario",
    "ood_load_step_scenario",
    "ood_islanding_scenario",
    "default_scenarios",
    "build_dataset",
    "split_records",
    "subspace_init",
    "refine_io_maps",
    "identify",
    "order_sweep",
    "closed_loop_stability",
    "r_squared",
    "evaluate",
    "spectrum",
    "__version__",
]
