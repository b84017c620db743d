"""Deterministic on-disk artifacts: records, models, manifests, plots.

Every writer here is bit-reproducible: floats are serialized with their
shortest round-trip representation, JSON keys are sorted, and manifest
timestamps honor ``SOURCE_DATE_EPOCH`` so identical inputs yield identical
bytes.  Readers validate aggressively and raise with file/field context —
silent coercion of malformed data is worse than a crash.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from . import signals as _signals
from .normalform import HwNormalForm, Setpoints

#: Version tag embedded in every artifact for forward compatibility.
FORMAT_VERSION = 1

RECORD_COLUMNS = ("t", "v_d", "v_q", "i_d", "i_q")
RAW_COLUMNS = ("t", "v_a", "v_b", "v_c", "i_a", "i_b", "i_c")


class ConfigError(ValueError):
    """A configuration file is missing, malformed, or inconsistent."""


def _fmt(x: float) -> str:
    """Shortest decimal string that round-trips to the same float."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# records (CSV)
# ---------------------------------------------------------------------------


def write_record(path: str | Path, series: _signals.DqSeries) -> None:
    """Write one dq record as CSV with columns t, v_d, v_q, i_d, i_q."""
    lines = [",".join(RECORD_COLUMNS)]
    t = series.t
    for k in range(len(series)):
        lines.append(",".join((
            _fmt(t[k]),
            _fmt(series.v[k].real), _fmt(series.v[k].imag),
            _fmt(series.i[k].real), _fmt(series.i[k].imag),
        )))
    Path(path).write_text("\n".join(lines) + "\n")


def _read_csv_columns(path: Path, expected: tuple[str, ...]) -> np.ndarray:
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ConfigError(f"{path}: empty record file")
    header = tuple(h.strip() for h in lines[0].split(","))
    if header != expected:
        raise ConfigError(
            f"{path}: expected columns {','.join(expected)}, "
            f"found {','.join(header)}"
        )
    rows = []
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            rows.append([float(cell) for cell in ln.split(",")])
        except ValueError as exc:
            raise ConfigError(
                f"{path}: line {lineno}: non-numeric cell ({exc})"
            ) from exc
    data = np.array(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] != len(expected) or len(data) < 2:
        raise ConfigError(f"{path}: need at least 2 rows of {len(expected)} columns")
    if not np.all(np.isfinite(data)):
        raise ConfigError(f"{path}: non-finite values in record")
    return data


def _grid_from_times(path: Path, t: np.ndarray) -> tuple[float, float]:
    dt = float(t[1] - t[0])
    if dt <= 0.0:
        raise ConfigError(f"{path}: time column must be strictly increasing")
    expected = t[0] + dt * np.arange(len(t))
    if np.max(np.abs(t - expected)) > 1e-9 * max(1.0, abs(t[-1])):
        raise ConfigError(f"{path}: time column is not a uniform grid")
    return float(t[0]), dt


def read_record(path: str | Path) -> _signals.DqSeries:
    """Read a dq record CSV back into a series (grid uniformity enforced)."""
    path = Path(path)
    data = _read_csv_columns(path, RECORD_COLUMNS)
    t0, dt = _grid_from_times(path, data[:, 0])
    return _signals.DqSeries(
        t0=t0, dt=dt,
        v=data[:, 1] + 1j * data[:, 2],
        i=data[:, 3] + 1j * data[:, 4],
    )


def read_record_abc(path: str | Path, frame_omega: float = _signals.OMEGA0
                    ) -> _signals.DqSeries:
    """Ingest raw three-phase samples, rotating at the nominal frequency.

    Columns: t, v_a, v_b, v_c, i_a, i_b, i_c.  Each row is projected into
    the synchronous frame at angle ``frame_omega * t``.
    """
    path = Path(path)
    data = _read_csv_columns(path, RAW_COLUMNS)
    t0, dt = _grid_from_times(path, data[:, 0])
    t = data[:, 0]
    v = np.empty(len(data), dtype=complex)
    i = np.empty(len(data), dtype=complex)
    for k in range(len(data)):
        angle = frame_omega * t[k]
        v[k] = _signals.park_transform(data[k, 1:4], angle)
        i[k] = _signals.park_transform(data[k, 4:7], angle)
    return _signals.DqSeries(t0=t0, dt=dt, v=v, i=i)


# ---------------------------------------------------------------------------
# models (JSON)
# ---------------------------------------------------------------------------


def _complex_out(z: np.ndarray) -> dict:
    z = np.asarray(z, dtype=complex)
    return {"re": [float(x) for x in z.real.ravel()],
            "im": [float(x) for x in z.imag.ravel()]}


def _complex_in(obj: dict, shape: tuple[int, ...], where: str) -> np.ndarray:
    try:
        re = np.array(obj["re"], dtype=float).reshape(shape)
        im = np.array(obj["im"], dtype=float).reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: malformed complex array ({exc})") from exc
    return re + 1j * im


def model_to_dict(model: HwNormalForm, meta: dict | None = None) -> dict:
    """JSON-ready dict of a continuous model (real A, B; complex C, D)."""
    n = model.n_ivars
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "normal-form",
        "n_ivars": n,
        "a": [[float(x) for x in row] for row in model.a],
        "b": [[float(x) for x in row] for row in model.b],
        "c": _complex_out(model.c),
        "d": _complex_out(model.d),
        "setpoints": {
            "p": float(model.setpoints.p),
            "q": float(model.setpoints.q),
            "v": float(model.setpoints.v),
        },
    }
    if meta:
        doc["meta"] = meta
    return doc


def model_from_dict(doc: dict, where: str = "model") -> tuple[HwNormalForm, dict]:
    """Parse a model document; returns (model, meta)."""
    try:
        if doc.get("kind") != "normal-form":
            raise ConfigError(f"{where}: not a normal-form model document")
        n = int(doc["n_ivars"])
        a = np.array(doc["a"], dtype=float).reshape(n, n)
        b = np.array(doc["b"], dtype=float).reshape(n, 3)
        c = _complex_in(doc["c"], (n,), where)
        d = _complex_in(doc["d"], (3,), where)
        sp = doc["setpoints"]
        setpoints = Setpoints(p=float(sp["p"]), q=float(sp["q"]), v=float(sp["v"]))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: malformed model document ({exc})") from exc
    model = HwNormalForm(n_ivars=n, a=a, b=b, c=c, d=d, setpoints=setpoints)
    return model, dict(doc.get("meta", {}))


def dump_json(doc: dict) -> str:
    """Canonical JSON text: sorted keys, fixed separators, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_model(path: str | Path, model: HwNormalForm,
                meta: dict | None = None) -> None:
    Path(path).write_text(dump_json(model_to_dict(model, meta)))


def read_model(path: str | Path) -> tuple[HwNormalForm, dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read model ({exc})") from exc
    return model_from_dict(doc, where=str(path))


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------


def _timestamp() -> str:
    """UTC ISO timestamp; pinned by SOURCE_DATE_EPOCH for reproducibility."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        moment = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
    else:
        moment = _dt.datetime.now(_dt.timezone.utc)
    return moment.replace(microsecond=0).isoformat().replace("+00:00", "Z")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


MANIFEST_NAME = "manifest.json"


def write_manifest(directory: str | Path, *, seed: int | None = None,
                   extra: dict | None = None) -> dict:
    """Hash every artifact in a directory tree into its manifest.

    The manifest itself is excluded from hashing.  Returns the document.
    """
    directory = Path(directory)
    files = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME:
            files[p.relative_to(directory).as_posix()] = sha256_file(p)
    doc = {
        "format_version": FORMAT_VERSION,
        "created": _timestamp(),
        "files": files,
    }
    if seed is not None:
        doc["seed"] = int(seed)
    if extra:
        doc["meta"] = extra
    (directory / MANIFEST_NAME).write_text(dump_json(doc))
    return doc


def verify_manifest(directory: str | Path) -> list[str]:
    """Check every hashed artifact; returns a list of problem descriptions."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        return [f"missing {MANIFEST_NAME}"]
    try:
        doc = json.loads(manifest_path.read_text())
        files = doc["files"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        return [f"malformed manifest: {exc}"]
    problems = []
    for rel, digest in sorted(files.items()):
        target = directory / rel
        if not target.is_file():
            problems.append(f"missing file {rel}")
        elif sha256_file(target) != digest:
            problems.append(f"hash mismatch for {rel}")
    on_disk = {
        p.relative_to(directory).as_posix()
        for p in directory.rglob("*")
        if p.is_file() and p.name != MANIFEST_NAME
    }
    for rel in sorted(on_disk - set(files)):
        problems.append(f"unlisted file {rel}")
    return problems


# ---------------------------------------------------------------------------
# TOML pipeline configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Validated contents of a pipeline TOML file."""

    plant_kind: str  # droop | dvoc
    plant_params: dict
    seed: int
    scenario_instances: int
    scenario_classes: tuple[str, ...]
    fractions: tuple[float, float, float]
    dt_record: float
    dt_sim: float
    orders: tuple[int, ...]
    max_iters: int
    n_restarts: int
    include_ood: bool
    network_y_re: float
    network_y_im: float


_DEFAULTS = {
    "seed": 0,
    "instances": 3,
    "classes": ("magnitude", "frequency", "rapid"),
    "fractions": (0.7, 0.2, 0.1),
    "dt_record": 1e-3,
    "dt_sim": 5e-5,
    "orders": (0, 1, 2, 3, 4),
    "max_iters": 200,
    "n_restarts": 2,
    "include_ood": True,
    "network_y_re": 0.0,
    "network_y_im": -0.8,
}


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a pipeline TOML file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    try:
        with open(path, "rb") as fh:
            doc = _toml.load(fh)
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc

    def section(name: str) -> dict:
        value = doc.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: [{name}] must be a table")
        return value

    plant = section("plant")
    kind = plant.get("kind")
    if kind not in ("droop", "dvoc"):
        raise ConfigError(
            f"{path}: [plant].kind must be 'droop' or 'dvoc', got {kind!r}"
        )
    params = {k: v for k, v in plant.items() if k != "kind"}
    for key, value in params.items():
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{path}: [plant].{key} must be a number")

    sc = section("scenarios")
    seed = doc.get("seed", _DEFAULTS["seed"])
    if not isinstance(seed, int):
        raise ConfigError(f"{path}: seed must be an integer")
    instances = sc.get("instances", _DEFAULTS["instances"])
    if not isinstance(instances, int) or instances < 1:
        raise ConfigError(f"{path}: [scenarios].instances must be a positive integer")
    classes = tuple(sc.get("classes", _DEFAULTS["classes"]))
    for cls in classes:
        if cls not in ("magnitude", "frequency", "rapid"):
            raise ConfigError(f"{path}: unknown scenario class {cls!r}")
    if not classes:
        raise ConfigError(f"{path}: [scenarios].classes must not be empty")
    include_ood = sc.get("include_ood", _DEFAULTS["include_ood"])
    if not isinstance(include_ood, bool):
        raise ConfigError(f"{path}: [scenarios].include_ood must be a boolean")

    split = section("split")
    fractions = tuple(split.get("fractions", _DEFAULTS["fractions"]))
    if len(fractions) != 3 or not all(
        isinstance(f, (int, float)) and not isinstance(f, bool) for f in fractions
    ):
        raise ConfigError(f"{path}: [split].fractions must be three numbers")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"{path}: [split].fractions must be >= 0 and sum to 1")

    sampling = section("sampling")
    dt_record = float(sampling.get("dt_record", _DEFAULTS["dt_record"]))
    dt_sim = float(sampling.get("dt_sim", _DEFAULTS["dt_sim"]))
    if dt_record <= 0 or dt_sim <= 0 or dt_record < dt_sim:
        raise ConfigError(f"{path}: [sampling] needs 0 < dt_sim <= dt_record")

    ident = section("identify")
    orders = tuple(ident.get("orders", _DEFAULTS["orders"]))
    if not orders or not all(isinstance(n, int) and n >= 0 for n in orders):
        raise ConfigError(f"{path}: [identify].orders must be non-negative integers")
    max_iters = ident.get("max_iters", _DEFAULTS["max_iters"])
    n_restarts = ident.get("n_restarts", _DEFAULTS["n_restarts"])
    if not isinstance(max_iters, int) or max_iters < 0:
        raise ConfigError(f"{path}: [identify].max_iters must be >= 0")
    if not isinstance(n_restarts, int) or n_restarts < 0:
        raise ConfigError(f"{path}: [identify].n_restarts must be >= 0")

    network = section("network")
    y_re = float(network.get("y_re", _DEFAULTS["network_y_re"]))
    y_im = float(network.get("y_im", _DEFAULTS["network_y_im"]))
    if y_re == 0.0 and y_im == 0.0:
        raise ConfigError(f"{path}: [network] admittance must be nonzero")

    return PipelineConfig(
        plant_kind=kind,
        plant_params=params,
        seed=seed,
        scenario_instances=instances,
        scenario_classes=classes,
        fractions=tuple(float(f) for f in fractions),
        dt_record=dt_record,
        dt_sim=dt_sim,
        orders=orders,
        max_iters=max_iters,
        n_restarts=n_restarts,
        include_ood=include_ood,
        network_y_re=y_re,
        network_y_im=y_im,
    )


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

DATASET_NAME = "dataset.json"
RECORDS_DIR = "records"


def write_dataset(directory: str | Path, dataset, *, seed: int,
                  extra: dict | None = None) -> None:
    """Write a dataset directory: records/, dataset.json, manifest.json."""
    from .scenarios import Dataset  # local import to keep layering flat

    assert isinstance(dataset, Dataset)
    directory = Path(directory)
    (directory / RECORDS_DIR).mkdir(parents=True, exist_ok=True)
    for name in sorted(dataset.records):
        write_record(directory / RECORDS_DIR / f"{name}.csv",
                     dataset.records[name])
    doc = {
        "format_version": FORMAT_VERSION,
        "dt": float(dataset.dt),
        "seed": int(seed),
        "setpoints": {
            "p": float(dataset.setpoints.p),
            "q": float(dataset.setpoints.q),
            "v": float(dataset.setpoints.v),
        },
        "split": {k: list(v) for k, v in dataset.split.items()},
        "ood": list(dataset.ood),
        "records": {
            name: {
                "scenario_class": meta.scenario_class,
                "partition": meta.partition,
                "duration": float(meta.duration),
                "seed": meta.seed,
            }
            for name, meta in sorted(dataset.meta.items())
        },
    }
    if extra:
        doc["meta"] = extra
    (directory / DATASET_NAME).write_text(dump_json(doc))
    write_manifest(directory, seed=seed)


def read_dataset(directory: str | Path):
    """Read a dataset directory back; returns (Dataset, document dict).

    The manifest is verified first; any mismatch raises ``ConfigError``.
    """
    from .scenarios import Dataset, RecordMeta

    directory = Path(directory)
    problems = verify_manifest(directory)
    if problems:
        raise ConfigError(
            f"{directory}: manifest verification failed: " + "; ".join(problems)
        )
    try:
        doc = json.loads((directory / DATASET_NAME).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{directory}: cannot read dataset ({exc})") from exc
    try:
        sp = doc["setpoints"]
        setpoints = Setpoints(p=float(sp["p"]), q=float(sp["q"]), v=float(sp["v"]))
        split = {k: tuple(v) for k, v in doc["split"].items()}
        ood = tuple(doc["ood"])
        meta = {
            name: RecordMeta(
                name=name,
                scenario_class=entry["scenario_class"],
                partition=entry["partition"],
                duration=float(entry["duration"]),
                seed=entry["seed"],
            )
            for name, entry in doc["records"].items()
        }
        dt = float(doc["dt"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{directory}: malformed dataset document ({exc})") from exc
    records = {}
    for name in meta:
        records[name] = read_record(directory / RECORDS_DIR / f"{name}.csv")
        if abs(records[name].dt - dt) > 1e-12 * dt:
            raise ConfigError(f"{directory}: record {name} dt differs from dataset dt")
    return (
        Dataset(dt=dt, setpoints=setpoints, records=records, meta=meta,
                split=split, ood=ood),
        doc,
    )


# ---------------------------------------------------------------------------
# minimal deterministic SVG plots
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def write_svg_timeseries(
    path: str | Path,
    t: np.ndarray,
    curves: dict[str, np.ndarray],
    *,
    title: str = "",
    width: int = 720,
    height: int = 240,
) -> None:
    """Write a dependency-free SVG line plot (deterministic output).

    Intended for report artifacts: a handful of curves over a shared time
    axis, auto-scaled, with a small legend.  Not a plotting library.
    """
    t = np.asarray(t, dtype=float)
    if not curves:
        raise ValueError("need at least one curve")
    ys = [np.asarray(y, dtype=float) for y in curves.values()]
    for y in ys:
        if y.shape != t.shape:
            raise ValueError("every curve must match the time axis length")
    lo = min(float(np.nanmin(y)) for y in ys)
    hi = max(float(np.nanmax(y)) for y in ys)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("curves contain no finite data")
    if hi - lo < 1e-12:
        pad = max(1e-6, abs(hi) * 1e-3)
        lo, hi = lo - pad, hi + pad
    margin, top = 42.0, 24.0
    plot_w, plot_h = width - margin - 12.0, height - top - 28.0

    def sx(tv: float) -> float:
        return margin + (tv - t[0]) / max(t[-1] - t[0], 1e-12) * plot_w

    def sy(yv: float) -> float:
        return top + (hi - yv) / (hi - lo) * plot_h

    # subsample long series so the SVG stays small
    step = max(1, len(t) // 2000)
    idx = np.arange(0, len(t), step)
    if idx[-1] != len(t) - 1:
        idx = np.append(idx, len(t) - 1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{margin}" y="16" font-family="sans-serif" '
            f'font-size="12">{title}</text>'
        )
    parts.append(
        f'<rect x="{margin}" y="{top}" width="{plot_w:.1f}" '
        f'height="{plot_h:.1f}" fill="none" stroke="#888"/>'
    )
    for axis_val, label in ((lo, f"{lo:.4g}"), (hi, f"{hi:.4g}")):
        parts.append(
            f'<text x="4" y="{sy(axis_val) + 4:.1f}" font-family="sans-serif" '
            f'font-size="10">{label}</text>'
        )
    for tv in (t[0], t[-1]):
        parts.append(
            f'<text x="{sx(tv) - 8:.1f}" y="{height - 10}" '
            f'font-family="sans-serif" font-size="10">{tv:.4g}</text>'
        )
    for j, (name, y) in enumerate(curves.items()):
        color = _SVG_COLORS[j % len(_SVG_COLORS)]
        pts = " ".join(
            f"{sx(t[k]):.2f},{sy(y[k]):.2f}" for k in idx if np.isfinite(y[k])
        )
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1" '
            f'points="{pts}"/>'
        )
        parts.append(
            f'<text x="{margin + 6 + 110 * j:.1f}" y="{top + 12:.1f}" '
            f'font-family="sans-serif" font-size="10" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
