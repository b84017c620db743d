"""Command-line pipeline: simulate, identify, evaluate, closed-loop, report.

Exit codes: 0 on success, 1 when an operation fails (divergence, manifest
mismatch, fit below a requested threshold), 2 on usage or configuration
errors.  ``GFIDENT_OUT`` overrides every output location; ``GFIDENT_THREADS``
caps the compiled kernels' thread count.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics as _metrics
from . import plants as _plants
from . import scenarios as _scenarios
from . import signals as _signals
from . import storage as _storage
from . import sysid as _sysid
from .normalform import discretize, simulate_closed_loop
from .seeding import substream_seed
from .storage import ConfigError

_DEFAULT_CONFIG = _storage.PipelineConfig(
    plant_kind="droop",
    plant_params={},
    seed=0,
    scenario_instances=3,
    scenario_classes=("magnitude", "frequency", "rapid"),
    fractions=(0.7, 0.2, 0.1),
    dt_record=1e-3,
    dt_sim=5e-5,
    orders=(0, 1, 2, 3, 4),
    max_iters=200,
    n_restarts=2,
    include_ood=True,
    network_y_re=0.0,
    network_y_im=-0.8,
)


def _load_config_arg(path: str | None) -> _storage.PipelineConfig:
    if path is None:
        return _DEFAULT_CONFIG
    return _storage.load_config(path)


def _resolve_out(value: str) -> Path:
    """Output location, overridable through the environment."""
    env = os.environ.get("GFIDENT_OUT")
    return Path(env) if env else Path(value)


def _build_plant(config: _storage.PipelineConfig, network: _plants.StiffBus):
    cls = _plants.DroopParams if config.plant_kind == "droop" else _plants.DvocParams
    try:
        params = cls(**config.plant_params)
    except TypeError as exc:
        raise ConfigError(f"invalid [plant] parameter: {exc}") from exc
    if "q_set" not in config.plant_params:
        # Dispatch the reactive setpoint to the line's natural flow so the
        # nominal operating point sits exactly at zero error.
        params = dataclasses.replace(
            params,
            q_set=_plants.matched_reactive_setpoint(
                params.p_set, params.v_set, network),
        )
    if config.plant_kind == "droop":
        return _plants.DroopPlant(params)
    return _plants.DvocPlant(params)


def _build_network(config: _storage.PipelineConfig) -> _plants.StiffBus:
    return _plants.StiffBus(y=config.network_y_re + 1j * config.network_y_im)


def _build_scenarios(config: _storage.PipelineConfig, plant) -> list:
    chosen = []
    for i in range(config.scenario_instances):
        name_seed = lambda name: substream_seed(config.seed, name)
        if "magnitude" in config.scenario_classes:
            name = f"magnitude-{i:02d}"
            chosen.append(_scenarios.magnitude_step_scenario(
                name, seed=name_seed(name),
                slowest_time_constant=plant.slowest_time_constant))
        if "frequency" in config.scenario_classes:
            name = f"frequency-{i:02d}"
            chosen.append(_scenarios.frequency_step_scenario(
                name, seed=name_seed(name)))
        if "rapid" in config.scenario_classes:
            name = f"rapid-{i:02d}"
            chosen.append(_scenarios.rapid_small_changes_scenario(
                name, seed=name_seed(name)))
    if config.include_ood:
        try:
            chosen.append(_scenarios.ood_load_step_scenario(
                "ood-load-step", plant,
                seed=substream_seed(config.seed, "ood-load-step")))
        except ValueError as exc:
            print(f"note: skipping load-step scenario ({exc})", file=sys.stderr)
        if isinstance(plant, _plants.DroopPlant):
            chosen.append(_scenarios.ood_islanding_scenario(
                "ood-islanding",
                seed=substream_seed(config.seed, "ood-islanding")))
    return chosen


def _cmd_simulate(args) -> int:
    config = _load_config_arg(args.config)
    out = _resolve_out(args.out)
    network = _build_network(config)
    plant = _build_plant(config, network)
    scenario_list = _build_scenarios(config, plant)
    dataset = _scenarios.build_dataset(
        scenario_list, plant,
        network=network,
        fractions=config.fractions,
        seed=config.seed,
        dt_sim=config.dt_sim,
        dt_record=config.dt_record,
    )
    extra = {
        "plant": {"kind": config.plant_kind, **{
            k: float(v) for k, v in dataclasses.asdict(plant.params).items()}},
        "network": {"y_re": config.network_y_re, "y_im": config.network_y_im},
    }
    _storage.write_dataset(out, dataset, seed=config.seed, extra=extra)
    n_train = len(dataset.split["train"])
    n_val = len(dataset.split["validation"])
    n_test = len(dataset.split["test"])
    print(f"wrote {len(dataset.records)} records to {out} "
          f"(train/validation/test = {n_train}/{n_val}/{n_test}, "
          f"ood = {len(dataset.ood)})")
    return 0


def _ident_config(config: _storage.PipelineConfig, n_ivars: int,
                  max_iters: int | None) -> _sysid.IdentConfig:
    return _sysid.IdentConfig(
        n_ivars=n_ivars,
        max_iters=config.max_iters if max_iters is None else max_iters,
        n_restarts=config.n_restarts,
        seed=config.seed,
    )


def _model_meta(result: _sysid.IdentResult, seed: int) -> dict:
    return {
        "seed": int(seed),
        "dt": float(result.dt),
        "train_loss": float(result.train_loss),
        "mean_val_r2": float(result.mean_val_r2),
        "val_r2": [[float(a), float(b)] for a, b in result.val_r2],
        "logm_fallback": bool(result.logm_fallback),
        "init_stabilized": bool(result.init_stabilized),
        "d_norm": float(result.d_norm),
        "selected_run": int(result.selected_run),
        "selected_snapshot": int(result.selected_snapshot),
    }


def _cmd_identify(args) -> int:
    config = _load_config_arg(args.config)
    dataset, doc = _storage.read_dataset(Path(args.data))
    train = dataset.partition_records("train")
    validation = dataset.partition_records("validation")
    seed = int(doc.get("seed", config.seed))
    cfg = _ident_config(config, args.order, args.max_iters)
    cfg = _sysid.IdentConfig(
        n_ivars=cfg.n_ivars, max_iters=cfg.max_iters,
        n_restarts=cfg.n_restarts, seed=seed,
    )
    result = _sysid.identify(train, validation, dataset.setpoints, cfg)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _storage.write_model(out, result.model, meta=_model_meta(result, seed))
    print(f"order {args.order}: mean validation R^2 = {result.mean_val_r2:.6f}, "
          f"train loss = {result.train_loss:.3e} -> {out}")
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config_arg(args.config)
    dataset, doc = _storage.read_dataset(Path(args.data))
    train = dataset.partition_records("train")
    validation = dataset.partition_records("validation")
    seed = int(doc.get("seed", config.seed))
    orders = (
        tuple(int(tok) for tok in args.orders.split(","))
        if args.orders else config.orders
    )
    base = _sysid.IdentConfig(
        n_ivars=0,
        max_iters=config.max_iters if args.max_iters is None else args.max_iters,
        n_restarts=config.n_restarts,
        seed=seed,
    )
    sweep = _sysid.order_sweep(
        train, validation, dataset.setpoints, orders=orders, config=base
    )
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    selected = sweep.results[sweep.selected_order]
    _storage.write_model(
        out / "model.json", selected.model,
        meta=_model_meta(selected, seed),
    )
    summary = {
        "format_version": _storage.FORMAT_VERSION,
        "selected_order": sweep.selected_order,
        "orders": {
            str(n): {
                "mean_val_r2": float(r.mean_val_r2),
                "train_loss": float(r.train_loss),
                "d_norm": float(r.d_norm),
                "logm_fallback": bool(r.logm_fallback),
            }
            for n, r in sweep.results.items()
        },
    }
    (out / "sweep.json").write_text(_storage.dump_json(summary))
    for n in sorted(sweep.results):
        r = sweep.results[n]
        marker = " <- selected" if n == sweep.selected_order else ""
        print(f"order {n}: mean validation R^2 = {r.mean_val_r2:.6f}{marker}")
    print(f"wrote {out / 'model.json'} and {out / 'sweep.json'}")
    return 0


def _cmd_evaluate(args) -> int:
    model, _ = _storage.read_model(args.model)
    dataset, _ = _storage.read_dataset(Path(args.data))
    records = dataset.partition_records(args.partition)
    if not records:
        raise ConfigError(f"partition {args.partition!r} has no records")
    report = _metrics.evaluate(model, records, dataset.setpoints)
    for row in report.records:
        print(f"{row.name}: R^2(v_d) = {row.r2_d:.6f}, "
              f"R^2(v_q) = {row.r2_q:.6f}, "
              f"max|dv| = {row.max_abs_error:.3e}")
    print(f"mean R^2 = {report.mean_r2:.6f}")
    if args.out:
        out = _resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "format_version": _storage.FORMAT_VERSION,
            "partition": args.partition,
            "records": {
                row.name: {
                    "r2_d": row.r2_d, "r2_q": row.r2_q,
                    "max_abs_error": row.max_abs_error,
                    "mean_abs_error": row.mean_abs_error,
                } for row in report.records
            },
            "mean_r2_d": report.mean_r2_d,
            "mean_r2_q": report.mean_r2_q,
        }
        out.write_text(_storage.dump_json(doc))
        print(f"wrote {out}")
    if args.min_r2 is not None and report.min_r2 < args.min_r2:
        print(f"fit below threshold: min R^2 {report.min_r2:.6f} < "
              f"{args.min_r2}", file=sys.stderr)
        return 1
    return 0


def _cmd_closed_loop(args) -> int:
    model, _ = _storage.read_model(args.model)
    config = _load_config_arg(args.config)
    network = _build_network(config)
    model_dt = discretize(model, config.dt_record)
    events = []
    if args.v_step is not None:
        events.append((args.t_event, {"v_slack": args.v_step}))
    if args.f_step is not None:
        events.append((args.t_event, {"freq_dev": args.f_step}))
    series = simulate_closed_loop(
        model_dt, network, args.duration, theta0=0.0 + 0.0j,
        events=tuple(events),
    )
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _storage.write_record(out, series)
    print(f"wrote closed-loop record ({len(series)} samples) to {out}")
    v_mag = np.abs(series.v)
    outside = np.flatnonzero((v_mag < 0.5) | (v_mag > 1.5))
    if outside.size:
        t_first = series.t0 + outside[0] * series.dt
        print(f"divergence: |v| left the [0.5, 1.5] pu band at "
              f"t = {t_first:.3f} s", file=sys.stderr)
    return 0


def _cmd_report(args) -> int:
    model, model_meta = _storage.read_model(args.model)
    dataset, doc = _storage.read_dataset(Path(args.data))
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)

    partitions = {}
    for part in ("train", "validation", "test"):
        records = dataset.partition_records(part)
        if records:
            partitions[part] = _metrics.evaluate(model, records, dataset.setpoints)
    ood_report = None
    if dataset.ood:
        ood_report = _metrics.evaluate(
            model, dataset.partition_records("ood"), dataset.setpoints
        )

    net_doc = doc.get("meta", {}).get("network", {})
    network = _plants.StiffBus(
        y=float(net_doc.get("y_re", 0.0)) + 1j * float(net_doc.get("y_im", -0.8))
    )
    stability = _sysid.closed_loop_stability(model, network)

    flags = {}
    plot_names = list(dataset.split.get("test", ())) + list(dataset.ood)
    for name in plot_names:
        series = dataset.records[name]
        v_pred = _metrics.predict_voltage(model, series, dataset.setpoints)
        comparison = _metrics.spectrum_comparison(series, v_pred, "v_mag")
        if comparison.flagged:
            flags[name] = [[f, db] for f, db in comparison.flagged]
        finite = np.all(np.isfinite(v_pred))
        curves = {
            "v_d measured": series.v.real,
            "v_d model": v_pred.real if finite else np.zeros(len(series)),
            "v_q measured": series.v.imag,
            "v_q model": v_pred.imag if finite else np.zeros(len(series)),
        }
        _storage.write_svg_timeseries(
            out / f"replay-{name}.svg", series.t, curves,
            title=f"open-loop replay: {name}",
        )

    def _rows(report: _metrics.EvalReport) -> dict:
        return {
            row.name: {
                "r2_d": row.r2_d, "r2_q": row.r2_q,
                "max_abs_error": row.max_abs_error,
            } for row in report.records
        }

    report_doc = {
        "format_version": _storage.FORMAT_VERSION,
        "model_meta": model_meta,
        "partitions": {
            part: {"records": _rows(rep), "mean_r2": rep.mean_r2}
            for part, rep in partitions.items()
        },
        "ood": (
            {"records": _rows(ood_report), "mean_r2": ood_report.mean_r2}
            if ood_report else None
        ),
        "stability": {
            "has_equilibrium": stability.has_equilibrium,
            "is_stable": stability.is_stable,
            "spectral_abscissa": stability.spectral_abscissa,
            "eigenvalues": [[z.real, z.imag] for z in stability.eigenvalues],
        },
        "spectrum_flags": flags,
    }
    (out / "report.json").write_text(_storage.dump_json(report_doc))
    for part, rep in partitions.items():
        print(f"{part}: mean R^2 = {rep.mean_r2:.6f}")
    if ood_report:
        print(f"ood: mean R^2 = {ood_report.mean_r2:.6f}")
    print(f"closed-loop stable: {stability.is_stable}")
    if flags:
        for name, rows in flags.items():
            freqs = ", ".join(f"{f:.1f} Hz (+{db:.1f} dB)" for f, db in rows)
            print(f"unmodeled spectral lines in {name}: {freqs}")
    print(f"wrote report to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gfident",
        description="Gray-box identification of grid-forming inverter models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate scenarios into a dataset")
    p.add_argument("--config", help="pipeline TOML file")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("identify", help="fit one model order to a dataset")
    p.add_argument("--config", help="pipeline TOML file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--order", type=int, required=True, help="internal order")
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--out", required=True, help="model JSON path")
    p.set_defaults(func=_cmd_identify)

    p = sub.add_parser("sweep", help="fit a range of orders and select one")
    p.add_argument("--config", help="pipeline TOML file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--orders", help="comma-separated orders, e.g. 0,1,2,3")
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("evaluate", help="score a model on dataset records")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--partition", default="test",
                   choices=("train", "validation", "test", "ood"))
    p.add_argument("--min-r2", type=float, default=None,
                   help="exit 1 when any channel R^2 falls below this")
    p.add_argument("--out", help="write a JSON report here")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("closed-loop",
                       help="replay the identified model against a stiff bus")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--config", help="pipeline TOML file")
    p.add_argument("--duration", type=float, default=4.0)
    p.add_argument("--t-event", type=float, default=1.0)
    p.add_argument("--v-step", type=float, default=None,
                   help="slack magnitude after the event (pu)")
    p.add_argument("--f-step", type=float, default=None,
                   help="slack frequency deviation after the event (Hz)")
    p.add_argument("--out", required=True, help="output record CSV")
    p.set_defaults(func=_cmd_closed_loop)

    p = sub.add_parser("report", help="full evaluation report with plots")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("GFIDENT_THREADS")
    if threads is not None:
        try:
            count = int(threads)
            if count < 1:
                raise ValueError
        except ValueError:
            print(f"GFIDENT_THREADS must be a positive integer, "
                  f"got {threads!r}", file=sys.stderr)
            return 2
        import numba

        numba.set_num_threads(count)

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # operational failure -> exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
