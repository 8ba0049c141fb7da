"""Command-line front end.

::

    jointparity run <config.ini> [--output DIR] [--workers N]
    jointparity compare <a> <b>
    jointparity validate <config.ini>

A run reads one INI file, validates every field, executes the experiment and
writes a result bundle: the data tables (CSV and/or JSON), ``summary.json``,
a ``config.ini`` snapshot and ``provenance.json``.  Exit codes: 0 success,
2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .analysis import estimation as est
from .analysis.budget import BudgetConfig, error_budget
from .analysis.chsh import chsh_maximize
from .analysis.formulas import analytic_parity_population, ideal_ecs_wigner
from .evolve import NoiseModel, noise_phases
from .hamiltonian import NoiseDrive
from .protocols import (
    FOUR_OVER_PI2,
    WignerGrid,
    WignerPipeline,
    heating_rate_scan,
    multimode_parity,
    parity_filter_experiment,
    plane_betas,
    prepare_ecs,
    prepare_fock,
    ramsey_scan,
    sample_wigner_grid,
    sbs_breakdown_study,
    sbs_time_scan,
    scan_wigner,
    sdf_breakdown_study,
    sideband_thermometry,
)
from .qstate import DensityMatrix, HilbertSpec, ecs_state, fock_state, wigner_point

__all__ = [
    "RunConfig",
    "ConfigError",
    "load_config",
    "run",
    "compare",
    "emit_grid",
    "read_grid",
    "main",
    "ENV_OUTPUT",
]

ENV_OUTPUT = "JOINTPARITY_OUTPUT_DIR"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
GRID_COLUMNS = ("beta1_re", "beta1_im", "beta2_re", "beta2_im", "W", "stderr", "shots")
PLANES = ("real-real", "imag-imag", "real-imag", "imag-real")
EXPERIMENTS = ("sbs-scan", "wigner-scan", "ecs-tomography", "estimate-dm", "chsh", "parity-filter",
               "error-budget", "ramsey", "thermometry", "lda-study", "multimode-parity")
TWO_PI = 2 * math.pi


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists ``section.key: message`` entries."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


class NumericalFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage


# ----------------------------------------------------------------------------
# value parsing


def _floats(text: str) -> tuple[float, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(float(p) for p in parts)


def _ints(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*allowed: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in allowed:
            raise ValueError(f"must be one of {', '.join(allowed)}")
        return t
    return parse


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return "" if value is None else str(value)


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PhysicsConfig:
    lamb_dicke: tuple = (0.1, 0.087)
    mode_dims: tuple = (8, 8)
    n_max: int = 7
    sdf_rabi_khz: float = 100.0
    sbs_rabi_khz: float = 103.0
    sbs_pi_time_us: float = 550.0
    generation_time_us: float = 350.0


@dataclass(frozen=True)
class NoiseConfig:
    nbar_init: tuple = (0.0, 0.0)
    heat_rates: tuple = (0.0, 0.0)
    dephasing_rates: tuple = (0.0, 0.0)
    noise_60hz_hz: float = 0.0
    n_phases: int = 8
    q_up: float = 1.0
    q_down: float = 0.0

    def model(self) -> NoiseModel:
        drive = NoiseDrive(TWO_PI * self.noise_60hz_hz) if self.noise_60hz_hz > 0 else None
        return NoiseModel(self.nbar_init, self.heat_rates, self.dephasing_rates, drive,
                          self.q_up, self.q_down)


@dataclass(frozen=True)
class SamplingConfig:
    mode: str = "infinite_shot"
    shots: int = 0
    seed: int | None = None
    plane: str = "imag-imag"
    axis1: tuple = (-2.0, 2.0, 9)
    axis2: tuple = (-2.0, 2.0, 9)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(np.linspace(a[0], a[1], int(a[2])) for a in (self.axis1, self.axis2))


@dataclass(frozen=True)
class OutputConfig:
    directory: str = ""
    formats: tuple = ("csv", "json")


_SECTION_TYPES = {"physics": PhysicsConfig, "noise": NoiseConfig, "sampling": SamplingConfig,
                  "output": OutputConfig}

_FIELD_PARSERS: dict[str, dict[str, Callable[[str], object]]] = {
    "physics": {"lamb_dicke": _floats, "mode_dims": _ints, "n_max": int, "sdf_rabi_khz": float,
                "sbs_rabi_khz": float, "sbs_pi_time_us": float, "generation_time_us": float},
    "noise": {"nbar_init": _floats, "heat_rates": _floats, "dephasing_rates": _floats,
              "noise_60hz_hz": float, "n_phases": int, "q_up": float, "q_down": float},
    "sampling": {"mode": _choice("infinite_shot", "sampled"), "shots": int,
                 "seed": lambda s: None if s.strip() == "" else int(s),
                 "plane": _choice(*PLANES), "axis1": _floats, "axis2": _floats},
    "output": {"directory": str.strip,
               "formats": lambda s: tuple(p.strip() for p in s.split(",") if p.strip())},
}

# experiment options: key -> (parser, default text)
_STATE_OPTS = {
    "state": (_choice("fock", "ecs"), "fock"),
    "n": (_ints, "1, 1"),
    "alpha": (_floats, "1.2, 1.2"),
    "parity": (_choice("even", "odd"), "even"),
    "prepare": (_choice("ideal", "simulated"), "ideal"),
    "readout": (_choice("ideal", "exact", "direct"), "ideal"),
}
OPTIONS: dict[str, dict[str, tuple[Callable[[str], object], str]]] = {
    "sbs-scan": {"n": (_ints, "1, 0"), "t_max_us": (float, "1100"), "n_points": (int, "111"),
                 "prepare": (_bool, "false"), "readout": (_choice("exact", "ideal"), "exact"),
                 "carrier": (_bool, "false"), "carrier_detuning_khz": (float, "360"),
                 "round_times": (_bool, "true")},
    "wigner-scan": dict(_STATE_OPTS),
    "ecs-tomography": {**{k: _STATE_OPTS[k] for k in ("alpha", "parity", "readout")},
                       "prepare": (_choice("ideal", "simulated"), "simulated"),
                       "planes": (lambda s: tuple(_choice(*PLANES)(p) for p in s.split(",")),
                                  "real-real, imag-imag")},
    "estimate-dm": {"grid1": (str.strip, ""), "grid2": (str.strip, ""),
                    "parity": (_choice("even", "odd"), "even"),
                    "true_alpha": (_floats, "1.31, 1.26"), "true_nbar": (_floats, "0.03, 0.05"),
                    "true_heat": (_floats, "11, 52"), "true_dephase": (_floats, "1307, 378"),
                    "true_c": (float, "0.009"),
                    "init_alpha": (_floats, "1.2, 1.2"), "init_nbar": (_floats, "0.03, 0.03"),
                    "init_heat": (_floats, "6.1, 39"), "init_dephase": (_floats, "750, 750"),
                    "init_c": (float, "0"),
                    "n_starts": (int, "5"), "max_evals": (int, "800"), "n_resamples": (int, "50"),
                    "target_alpha": (_floats, "")},
    "chsh": {"source": (_choice("ideal", "g-stage", "gdm"), "ideal"), "alpha": (_floats, "1.2, 1.2"),
             "step": (float, "0.1"), "search_domain": (float, "2.0"),
             "symmetric": (_bool, "true"), "refine": (_bool, "true")},
    "parity-filter": {"t_wait_ms": (float, "10"), "readout": (_choice("exact", "ideal"), "exact")},
    "error-budget": {"alpha": (_floats, "1.2, 1.2"), "grid_points": (int, "21"),
                     "extent": (float, "2.5"), "cascade": (_bool, "false")},
    "ramsey": {"kind": (_choice("bsb", "sbs"), "bsb"), "t_max_ms": (float, "3"),
               "n_points": (int, "31"), "shot_sigma_hz": (_floats, "0, 0"),
               "shot_correlation": (float, "1"), "sinusoid_hz": (float, "0"),
               "sinusoid_modes": (_floats, "1, 1"), "differential_dephasing": (float, "0")},
    "thermometry": {"nbar_true": (float, "0.05"), "t_max_ms": (float, "1"), "t_step_us": (float, "5"),
                    "sideband_rabi_khz": (float, "100"), "heating_rate": (float, "0"),
                    "waits_ms": (_floats, "0, 5, 10")},
    "lda-study": {"targets": (_floats, "2, 4, 6, 8"), "eta": (float, "0.1"), "dim": (int, "200"),
                  "ns": (_ints, "1, 2, 3, 4, 5, 6, 7, 8")},
    "multimode-parity": {"occupations": (_ints, "1, 0, 1"), "mode_dim": (int, "3")},
}
_SAMPLED = {"thermometry"}


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; round-trips through :meth:`to_ini`."""

    experiment: str
    physics: PhysicsConfig = PhysicsConfig()
    noise: NoiseConfig = NoiseConfig()
    sampling: SamplingConfig = SamplingConfig()
    output: OutputConfig = OutputConfig()
    options: dict = field(default_factory=dict)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"experiment": self.experiment}
        for name in _SECTION_TYPES:
            obj = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
        cp["experiment"] = {k: v for k, v in sorted(self.options.items())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def option(self, key: str):
        """Parsed experiment option (default when absent)."""
        parser, default = OPTIONS[self.experiment][key]
        return parser(self.options.get(key, default))

    def space(self) -> HilbertSpec:
        return HilbertSpec(tuple(self.physics.mode_dims), tuple(self.physics.lamb_dicke))

    @property
    def sdf_omega(self) -> float:
        return TWO_PI * 1e3 * self.physics.sdf_rabi_khz

    @property
    def seed(self) -> int:
        return int(self.sampling.seed or 0)


def _parse(cp: configparser.ConfigParser) -> RunConfig:
    problems: list[str] = []
    experiment = cp.get("run", "experiment", fallback="").strip()
    if not experiment:
        problems.append("run.experiment: required")
    elif experiment not in EXPERIMENTS:
        problems.append(f"run.experiment: unknown experiment {experiment!r}")
    for sec in cp.sections():
        if sec not in ("run", "experiment", *_SECTION_TYPES):
            problems.append(f"{sec}: unknown section")
    for key in cp["run"] if cp.has_section("run") else ():
        if key != "experiment":
            problems.append(f"run.{key}: unknown key")
    parts = {}
    for sec, cls in _SECTION_TYPES.items():
        values = {}
        if cp.has_section(sec):
            for key, text in cp[sec].items():
                parser = _FIELD_PARSERS[sec].get(key)
                if parser is None:
                    problems.append(f"{sec}.{key}: unknown key")
                    continue
                try:
                    values[key] = parser(text)
                except (ValueError, TypeError) as exc:
                    problems.append(f"{sec}.{key}: {exc}")
        parts[sec] = cls(**values)
    options = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    cfg = RunConfig(experiment or "?", parts["physics"], parts["noise"], parts["sampling"],
                    parts["output"], options)
    problems += _check(cfg) if experiment in EXPERIMENTS else []
    if problems:
        raise ConfigError(problems)
    return cfg


def _check(cfg: RunConfig) -> list[str]:
    p: list[str] = []
    ph, nz, sm, out = cfg.physics, cfg.noise, cfg.sampling, cfg.output
    if len(ph.lamb_dicke) != len(ph.mode_dims):
        p.append("physics.lamb_dicke: needs one value per mode")
    if any(d < 2 for d in ph.mode_dims):
        p.append("physics.mode_dims: every mode needs dimension >= 2")
    if any(e <= 0 for e in ph.lamb_dicke):
        p.append("physics.lamb_dicke: must be positive")
    for key in ("sdf_rabi_khz", "sbs_rabi_khz", "sbs_pi_time_us"):
        if getattr(ph, key) <= 0:
            p.append(f"physics.{key}: must be positive")
    if ph.n_max < 1:
        p.append("physics.n_max: must be >= 1")
    for key in ("nbar_init", "heat_rates", "dephasing_rates"):
        vals = getattr(nz, key)
        if len(vals) != 2:
            p.append(f"noise.{key}: needs two values")
        if any(v < 0 for v in vals):
            p.append(f"noise.{key}: must be non-negative")
    if nz.noise_60hz_hz < 0:
        p.append("noise.noise_60hz_hz: must be non-negative")
    if nz.n_phases < 1:
        p.append("noise.n_phases: must be >= 1")
    if not (0.0 <= nz.q_down < nz.q_up <= 1.0):
        p.append("noise.q_down: need 0 <= q_down < q_up <= 1")
    for key in ("axis1", "axis2"):
        ax = getattr(sm, key)
        if len(ax) != 3:
            p.append(f"sampling.{key}: expected 'start, stop, count'")
        elif ax[2] < 1 or ax[2] != int(ax[2]):
            p.append(f"sampling.{key}: grid axis must have a positive integer length")
    sampled = sm.mode == "sampled" or cfg.experiment in _SAMPLED or cfg.experiment == "estimate-dm"
    if sampled and sm.shots < 1:
        p.append("sampling.shots: sampled runs need shots >= 1")
    if sampled and sm.seed is None:
        p.append("sampling.seed: sampled runs need a seed")
    if sm.shots < 0:
        p.append("sampling.shots: must be non-negative")
    for f in out.formats:
        if f not in ("csv", "json"):
            p.append(f"output.formats: unknown format {f!r}")
    if not out.formats:
        p.append("output.formats: need at least one of csv, json")
    spec = OPTIONS[cfg.experiment]
    for key, text in cfg.options.items():
        if key not in spec:
            p.append(f"experiment.{key}: unknown option for {cfg.experiment}")
            continue
        try:
            spec[key][0](text)
        except (ValueError, TypeError) as exc:
            p.append(f"experiment.{key}: {exc}")
    if not p:
        p += _check_options(cfg)
    return p


def _check_options(cfg: RunConfig) -> list[str]:
    p = []
    exp = cfg.experiment
    two_mode = exp in ("sbs-scan", "wigner-scan", "ecs-tomography", "chsh", "parity-filter", "error-budget")
    if two_mode and len(cfg.physics.mode_dims) != 2:
        p.append("physics.mode_dims: this experiment needs two modes")
    if exp == "wigner-scan" and cfg.option("state") == "fock":
        n = cfg.option("n")
        if len(n) != 2 or any(k < 0 for k in n):
            p.append("experiment.n: need two non-negative phonon numbers")
        elif any(k >= d for k, d in zip(n, cfg.physics.mode_dims)):
            p.append("experiment.n: exceeds the mode truncation")
    if exp == "sbs-scan":
        n = cfg.option("n")
        if len(n) != 2 or any(k < 0 for k in n):
            p.append("experiment.n: need two non-negative phonon numbers")
        if cfg.option("n_points") < 1:
            p.append("experiment.n_points: must be >= 1")
    if exp in ("wigner-scan", "ecs-tomography", "chsh", "error-budget") and len(cfg.option("alpha")) != 2:
        p.append("experiment.alpha: need two amplitudes")
    if exp == "estimate-dm":
        g1, g2 = cfg.option("grid1"), cfg.option("grid2")
        if bool(g1) != bool(g2):
            p.append("experiment.grid1: give both grid1 and grid2 or neither")
        for key in ("grid1", "grid2"):
            path = cfg.option(key)
            if path and not Path(path).is_file():
                p.append(f"experiment.{key}: no such file {path!r}")
        if cfg.option("n_starts") < 1:
            p.append("experiment.n_starts: must be >= 1")
    if exp == "error-budget" and cfg.option("grid_points") < 1:
        p.append("experiment.grid_points: must be >= 1")
    if exp == "ramsey":
        if cfg.option("n_points") < 1:
            p.append("experiment.n_points: must be >= 1")
        if len(cfg.option("shot_sigma_hz")) != 2 or len(cfg.option("sinusoid_modes")) != 2:
            p.append("experiment.shot_sigma_hz: need two values per mode")
    if exp == "chsh" and (cfg.option("step") <= 0 or cfg.option("search_domain") <= 0):
        p.append("experiment.step: step and search_domain must be positive")
    if exp == "multimode-parity":
        occ = cfg.option("occupations")
        if not occ or any(k < 0 or k >= cfg.option("mode_dim") for k in occ):
            p.append("experiment.occupations: need phonon numbers below mode_dim")
    return p


def load_config(path: str | os.PathLike) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc.strerror}"]) from exc
    except configparser.Error as exc:
        raise ConfigError([f"config: {exc}"]) from exc
    return _parse(cp)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"config: {exc}"]) from exc
    return _parse(cp)


# ----------------------------------------------------------------------------
# emission


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, complex):
        return {"re": v.real, "im": v.imag}
    return v


def table_csv(columns: dict) -> str:
    names = list(columns)
    cols = [np.asarray(columns[n]).reshape(-1) for n in names]
    n_rows = len(cols[0]) if cols else 0
    if any(len(c) != n_rows for c in cols):
        raise ValueError("table columns differ in length")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in range(n_rows):
        w.writerow([_cell(c[r].item() if hasattr(c[r], "item") else c[r]) for c in cols])
    return buf.getvalue()


def table_json(columns: dict, metadata: dict | None = None) -> str:
    body = {"metadata": _jsonable(metadata or {}), "columns": list(columns),
            "data": {k: _jsonable(np.asarray(v).reshape(-1)) for k, v in columns.items()}}
    return json.dumps(body, indent=1, sort_keys=False) + "\n"


def grid_columns(grid: WignerGrid) -> dict:
    b = grid.betas.reshape(-1, 2) + 0.0   # drops negative zeros
    return {"beta1_re": b[:, 0].real, "beta1_im": b[:, 0].imag,
            "beta2_re": b[:, 1].real, "beta2_im": b[:, 1].imag,
            "W": grid.values.reshape(-1), "stderr": grid.std_errors.reshape(-1),
            "shots": grid.shot_counts.reshape(-1).astype(int)}


def _grid_metadata(grid: WignerGrid) -> dict:
    return {"plane": grid.plane, "beta1_axis": grid.beta1_axis, "beta2_axis": grid.beta2_axis,
            "shape": list(grid.shape), **{k: v for k, v in grid.metadata.items()}}


def emit_grid(grid: WignerGrid, stem: str | os.PathLike, formats=("csv", "json")) -> list[Path]:
    """Write ``stem.csv`` and/or ``stem.json``; rows run over ``beta2`` fastest."""
    stem = Path(stem)
    written = []
    cols = grid_columns(grid)
    for fmt in formats:
        if fmt == "csv":
            path = stem.with_suffix(".csv")
            _atomic_write(path, table_csv(cols))
        elif fmt == "json":
            path = stem.with_suffix(".json")
            _atomic_write(path, table_json(cols, _grid_metadata(grid)))
        else:
            raise ValueError(f"unknown format {fmt!r}")
        written.append(path)
    return written


def _infer_plane(b1: np.ndarray, b2: np.ndarray) -> str:
    def part(b):
        if np.any(b.real != 0) and np.any(b.imag != 0):
            raise ValueError("displacements do not lie on a coordinate plane")
        return "real" if np.any(b.real != 0) else "imag"
    return f"{part(b1)}-{part(b2)}"


def read_grid(path: str | os.PathLike, plane: str | None = None) -> WignerGrid:
    """Load a grid written by :func:`emit_grid` (CSV or JSON)."""
    path = Path(path)
    meta: dict = {}
    if path.suffix == ".json":
        body = json.loads(path.read_text(encoding="utf-8"))
        meta = body.get("metadata", {})
        data = {k: np.asarray(v, dtype=float) for k, v in body["data"].items()}
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, rows = rows[0], rows[1:]
        if tuple(header) != GRID_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        arr = np.array([[float(x) for x in r] for r in rows], dtype=float).reshape(-1, len(header))
        data = {h: arr[:, k] for k, h in enumerate(header)}
    b1 = data["beta1_re"] + 1j * data["beta1_im"]
    b2 = data["beta2_re"] + 1j * data["beta2_im"]
    plane = plane or meta.get("plane") or _infer_plane(b1, b2)
    if "shape" in meta:
        n1, n2 = meta["shape"]
    else:
        n2 = int(np.argmax(b1 != b1[0])) if np.any(b1 != b1[0]) else b1.size
        n1 = b1.size // n2
    if n1 * n2 != b1.size:
        raise ValueError(f"{path}: rows do not form a rectangular grid")
    first, second = plane.split("-")
    pick = {"real": np.real, "imag": np.imag}
    ax1 = pick[first](b1.reshape(n1, n2)[:, 0])
    ax2 = pick[second](b2.reshape(n1, n2)[0, :])
    betas = np.stack([b1.reshape(n1, n2), b2.reshape(n1, n2)], axis=-1)
    extra = {k: v for k, v in meta.items() if k not in ("plane", "beta1_axis", "beta2_axis", "shape")}
    return WignerGrid(plane, ax1, ax2, data["W"].reshape(n1, n2), data["shots"].reshape(n1, n2).astype(int),
                      data["stderr"].reshape(n1, n2), betas, extra)


# ----------------------------------------------------------------------------
# experiments


@dataclass
class Outputs:
    grids: dict = field(default_factory=dict)      # name -> WignerGrid
    tables: dict = field(default_factory=dict)     # name -> {column: array}
    summary: dict = field(default_factory=dict)


class _Stages:
    """Names the step in progress so failures can report it."""

    def __init__(self):
        self.current = "setup"

    def __call__(self, name: str) -> "_Stages":
        self.current = name
        return self


def _phases(cfg: RunConfig, needed: bool) -> list[float]:
    if needed and cfg.noise.noise_60hz_hz > 0:
        return list(noise_phases(cfg.noise.n_phases))
    return [0.0]


def _pipeline(cfg: RunConfig, readout: str, space: HilbertSpec) -> WignerPipeline:
    noise = cfg.noise.model()
    d_noise = noise if readout in ("exact", "direct") else None
    m_noise = NoiseModel(heat_rates=noise.heat_rates) if readout == "exact" else None
    return WignerPipeline(space, readout, d_noise, m_noise, cfg.sdf_omega,
                          cfg.physics.sbs_pi_time_us * 1e-6, cfg.physics.generation_time_us * 1e-6)


def _ecs_states(cfg: RunConfig, space, alpha, parity, prepare: str, phases) -> list:
    if prepare == "ideal":
        return [ecs_state(space, alpha[0], alpha[1], parity).dm()] * len(phases)
    noise = cfg.noise.model()
    return [prepare_ecs(space, alpha[0], alpha[1], parity, noise, omega=cfg.sdf_omega, phi_noise=p,
                        generation_time=cfg.physics.generation_time_us * 1e-6).state for p in phases]


def _scan(cfg: RunConfig, states, phases, pipe, plane, seed, workers) -> WignerGrid:
    sm = cfg.sampling
    return scan_wigner(states, plane, sm.axes(), sm.shots, cfg.noise.model(), mode=sm.mode,
                       pipeline=pipe, seed=seed, phi_noises=phases, workers=workers)


def _exp_wigner_scan(cfg: RunConfig, st: _Stages, workers: int) -> Outputs:
    space = cfg.space()
    readout, prepare = cfg.option("readout"), cfg.option("prepare")
    phases = _phases(cfg, readout != "ideal" or prepare == "simulated")
    st("preparation")
    if cfg.option("state") == "fock":
        n = cfg.option("n")
        if prepare == "ideal":
            states = [fock_state(space, "down", n).dm()] * len(phases)
        else:
            states = [prepare_fock(space, n[0], n[1], cfg.noise.model(), omega=cfg.sdf_omega)] * len(phases)
    else:
        states = _ecs_states(cfg, space, cfg.option("alpha"), cfg.option("parity"), prepare, phases)
    st("wigner scan")
    grid = _scan(cfg, states, phases, _pipeline(cfg, readout, space), cfg.sampling.plane, cfg.seed, workers)
    out = Outputs(grids={"wigner": grid})
    if prepare == "ideal" and cfg.sampling.mode == "infinite_shot":
        direct = np.array([wigner_point(states[0], tuple(b)) for b in grid.betas.reshape(-1, 2)])
        out.summary["max_abs_diff_direct"] = float(np.max(np.abs(direct - grid.values.reshape(-1))))
    out.summary["W_min"] = float(grid.values.min())
    out.summary["W_max"] = float(grid.values.max())
    return out


def _exp_ecs_tomography(cfg: RunConfig, st: _Stages, workers: int) -> Outputs:
    space = cfg.space()
    alpha, parity = cfg.option("alpha"), cfg.option("parity")
    readout, prepare = cfg.option("readout"), cfg.option("prepare")
    phases = _phases(cfg, readout != "ideal" or prepare == "simulated")
    st("preparation")
    states = _ecs_states(cfg, space, alpha, parity, prepare, phases)
    pipe = _pipeline(cfg, readout, space)
    out = Outputs()
    for k, plane in enumerate(cfg.option("planes")):
        st(f"wigner scan {plane}")
        # each plane draws from its own seed so the two slices are independent
        grid = _scan(cfg, states, phases, pipe, plane, cfg.seed + k, workers)
        out.grids[f"wigner_{plane}"] = grid
        ref = ideal_ecs_wigner(alpha[0], alpha[1], parity, grid.betas[..., 0], grid.betas[..., 1])
        rmse = float(np.sqrt(np.mean((grid.values - ref) ** 2)))
        out.summary[f"rmse_vs_ideal_{plane}"] = rmse
        out.summary[f"rmse_percent_{plane}"] = 100 * rmse / (2 * FOUR_OVER_PI2)
    return out


def _exp_estimate_dm(cfg: RunConfig, st: _Stages, workers: int) -> Outputs:
    opt = cfg.option
    parity = opt("parity")
    n_max = cfg.physics.n_max
    out = Outputs()
    init = est.ModelParams(opt("init_alpha"), opt("init_nbar"), opt("init_heat"), opt("init_dephase"),
                           opt("init_c"))
    if opt("grid1"):
        st("reading grids")
        grids = [read_grid(opt("grid1")), read_grid(opt("grid2"))]
    else:
        st("synthetic data")
        true = est.ModelParams(opt("true_alpha"), opt("true_nbar"), opt("true_heat"), opt("true_dephase"),
                               opt("true_c"))
        grids = []
        for k, plane in enumerate(("real-real", "imag-imag")):
            axes = cfg.sampling.axes()
            b = plane_betas(plane, *axes)
            W = est.forward_model(true, b, parity=parity, n_max=n_max)
            g = sample_wigner_grid(W, plane, axes, cfg.sampling.shots, None, cfg.seed + k, b)
            grids.append(g)
            out.grids[f"data_{plane}"] = g
        out.summary["true_params"] = dict(zip(est.PARAM_NAMES, true.vector()))
    st("fit")
    fit = est.fit_density_model(grids, init, parity=parity, n_starts=opt("n_starts"), seed=cfg.seed,
                                n_max=n_max, max_evals=opt("max_evals"))
    x = fit.params.vector()
    out.tables["fit_params"] = {"name": np.array(est.PARAM_NAMES), "value": x, "stderr": fit.stderr,
                                "at_bound": np.array([n in fit.at_bound for n in est.PARAM_NAMES])}
    target_alpha = opt("target_alpha") or None
    target = est.target_state(fit, target_alpha)
    f = est.state_functionals(fit.rho_est, target)
    lam, pops = est.dominant_eigenstate(fit.rho_est)
    k = n_max + 1
    idx = np.arange(pops.size)
    out.tables["dominant_eigenstate"] = {"i": idx, "n1": idx // k, "n2": idx % k, "population": pops}
    m = fit.rho_est.matrix
    ii, jj = np.meshgrid(np.arange(m.shape[0]), np.arange(m.shape[1]), indexing="ij")
    out.tables["rho_est"] = {"i": ii.reshape(-1), "j": jj.reshape(-1), "re": m.real.reshape(-1),
                             "im": m.imag.reshape(-1)}
    out.summary.update({"chi2_reduced": fit.chi2_reduced, "n_points": fit.n_points,
                        "at_bound": list(fit.at_bound), "fidelity": f["fidelity"], "purity": f["purity"],
                        "eigenvalues": f["eigenvalues"], "pt_min": f["pt_min"],
                        "dominant_eigenvalue": lam})
    n_res = opt("n_resamples")
    if n_res > 1:
        st("bootstrap")
        bs = est.bootstrap_fit(grids, fit, n_res, seed=cfg.seed, target_alpha=target_alpha, n_max=n_max)
        out.summary["bootstrap"] = {"param_std": dict(zip(est.PARAM_NAMES, bs.param_std)),
                                    "fidelity_std": bs.fidelity_std, "purity_std": bs.purity_std,
                                    "eigenvalue_std": bs.eigenvalue_std, "pt_min_std": bs.pt_min_std,
                                    "failures": bs.failures}
    return out


def chsh_source(cfg: RunConfig, source: str, alpha) -> Callable[[complex, complex], float]:
    """Wigner function callable for the CHSH search."""
    if source == "ideal":
        return lambda b1, b2: ideal_ecs_wigner(alpha[0], alpha[1], "even", b1, b2)
    space = cfg.space()
    readout = "ideal" if source == "g-stage" else "exact"
    phases = _phases(cfg, True)
    states = _ecs_states(cfg, space, alpha, "even", "simulated", phases)
    pipe = _pipeline(cfg, readout, space)
    if readout == "ideal":
        mean_state = DensityMatrix.from_array(space, np.mean([s.matrix for s in states], axis=0))
        return lambda b1, b2: pipe.value(mean_state, (b1, b2))
    return lambda b1, b2: float(np.mean([pipe.value(s, (b1, b2), p) for s, p in zip(states, phases)]))


def _exp_chsh(cfg: RunConfig, st: _Stages, workers: int) -> Outputs:
    st("preparation")
    W = chsh_source(cfg, cfg.option("source"), cfg.option("alpha"))
    st("chsh search")
    res = chsh_maximize(W, cfg.option("search_domain"), step=cfg.option("step"), plane=cfg.sampling.plane,
                        symmetric=cfg.option("symmetric"), refine=cfg.option("refine"))
    names = ("beta1_1", "beta1_2", "beta2_1", "beta2_2")
    return Outputs(summary={"S": res.S, "S_grid": res.S_grid, "violates": res.S > 2,
                            "settings": dict(zip(names, res.betas)),
                            "grid_settings": dict(zip(names, res.grid_betas)), "symmetric": res.symmetric})


def _exp_parity_filter(cfg: RunConfig, st: _Stages, workers: int) -> Outputs:
    st("parity filter")
    sm = cfg.sampling
    shots = sm.shots if sm.mode == "sampled" else None
    res = parity_filter_experiment(cfg.noise.model(), cfg.option("t_wait_ms") * 1e-3, shots,
                                   dims=tuple(cfg.physics.mode_dims), lamb_dicke=tuple(cfg.physics.lamb_dicke),
                                   sbs_pi_time=cfg.physics.sbs_pi_time_us * 1e-6,
                                   readout=cfg.option("readout"), seed=cfg.seed)
    stage, n1, n2, pop = [], [], [], []
    for k, P in res.populations.items():
        for (a, b), v in np.ndenumerate(P):
            stage.append(k)
            n1.append(a)
            n2.append(b)
            pop.append(v)
    out = Outputs()
    out.tables["populations"] = {"stage": np.array(stage), "n1": np.array(n1), "n2": np.array(n2),
                                 "population": np.array(pop)}
    out.tables["slices"] = {"beta2": res.beta2_axis, **{f"W_{k}": v for k, v in res.slices.items()}}
    out.summary = {f"p11_{k}": float(P[1, 1]) for k, P in res.populations.items()}
    out.summary["keep_probability"] = res.keep_probability
    return out


def _exp_error_budget(cfg: RunConfig, st: _Stages, workers: int) -> Outputs:
    bc = BudgetConfig(alpha=tuple(cfg.option("alpha")), dims=tuple(cfg.physics.mode_dims),
                      lamb_dicke=tuple(cfg.physics.lamb_dicke), plane=cfg.sampling.plane,
                      extent=cfg.option("extent"), grid_points=cfg.option("grid_points"),
                      n_phases=cfg.noise.n_phases, sdf_omega=cfg.sdf_omega,
                      sbs_pi_time=cfg.physics.sbs_pi_time_us * 1e-6,
                      generation_time=cfg.physics.generation_time_us * 1e-6)
    res = error_budget(cfg.noise.model(), config=bc, cascade=cfg.option("cascade"),
                       progress=lambda m: st(f"error budget: {m}"))
    rows = res.table()
    out = Outputs()
    out.tables["budget"] = {"stage": np.array([r[0] for r in rows]), "source": np.array([r[1] for r in rows]),
                            "loss_percent": np.array([100 * r[2] for r in rows])}
    out.summary = {"stage_loss_percent": {k: 100 * v for k, v in res.stage_loss.items()},
                   "total_percent": 100 * res.total, "contrast": res.contrast,
                   "cascade_loss_percent": {k: 100 * v for k, v in res.cascade.items()}}
    return out


def _exp_ramsey(cfg: RunConfig, st: _Stages, workers: int) -> Outputs:
    st("ramsey")
    t = np.linspace(0.0, cfg.option("t_max_ms") * 1e-3, cfg.option("n_points"))
    amp = cfg.option("sinusoid_hz") or cfg.noise.noise_60hz_hz
    res = ramsey_scan(cfg.option("kind"), t,
                      shot_sigma=tuple(TWO_PI * s for s in cfg.option("shot_sigma_hz")),
                      shot_correlation=cfg.option("shot_correlation"),
                      sinusoid=NoiseDrive(TWO_PI * amp) if amp > 0 else None,
                      sinusoid_modes=tuple(cfg.option("sinusoid_modes")),
                      differential_dephasing=cfg.option("differential_dephasing"),
                      n_noise_phases=cfg.noise.n_phases)
    out = Outputs(tables={"ramsey": {"t_wait": res.t_wait, "contrast": res.contrast, "flagged": res.flagged}})
    out.summary = {"fits": res.fits}
    if "gaussian" in res.fits and "exponential" in res.fits:
        out.summary["residual_ratio_gauss_over_exp"] = (res.fits["gaussian"]["residual"]
                                                        / max(res.fits["exponential"]["residual"], 1e-300))
    return out


def _exp_thermometry(cfg: RunConfig, st: _Stages, workers: int) -> Outputs:
    st("thermometry")
    t = np.arange(0.0, cfg.option("t_max_ms") * 1e-3 + 1e-12, cfg.option("t_step_us") * 1e-6)
    kw = dict(eta=cfg.physics.lamb_dicke[0], omega=TWO_PI * 1e3 * cfg.option("sideband_rabi_khz"))
    res = sideband_thermometry(cfg.option("nbar_true"), t, cfg.sampling.shots, seed=cfg.seed, **kw)
    out = Outputs(tables={"sidebands": {"t": res.t, "bsb": res.bsb, "rsb": res.rsb}})
    out.summary = {"nbar": res.nbar, "nbar_error": res.nbar_error}
    rate = cfg.option("heating_rate")
    if rate > 0:
        st("heating scan")
        waits = np.asarray(cfg.option("waits_ms")) * 1e-3
        hs = heating_rate_scan(rate, waits, nbar0=cfg.option("nbar_true"), shots=cfg.sampling.shots,
                               seed=cfg.seed, t_axis=t, **kw)
        out.tables["heating"] = {"wait": hs["waits"], "nbar": hs["nbar"], "nbar_error": hs["nbar_error"]}
        out.summary.update({"rate": hs["rate"], "rate_error": hs["rate_error"], "nbar0": hs["nbar0"]})
    return out


def _exp_lda(cfg: RunConfig, st: _Stages, workers: int) -> Outputs:
    st("force study")
    sdf = sdf_breakdown_study(cfg.option("targets"), cfg.option("eta"), cfg.option("dim"), cfg.sdf_omega)
    st("beam-splitter study")
    lam = tuple(cfg.physics.lamb_dicke[:2]) if len(cfg.physics.lamb_dicke) >= 2 else (0.1, 0.087)
    sbs = sbs_breakdown_study(cfg.option("ns"), lam, TWO_PI * 1e3 * cfg.physics.sbs_rabi_khz)
    out = Outputs()
    out.tables["force"] = {"target": sdf["target"], "nbar": sdf["nbar"], "fidelity": sdf["fidelity"]}
    out.tables["beam_splitter"] = {"n": sbs["n"], "t_map": sbs["t_map"],
                                   "t_map_over_t_pi": sbs["t_map"] / sbs["t_pi_ideal"]}
    out.summary = {"t_pi_ideal": sbs["t_pi_ideal"]}
    return out


def _exp_multimode(cfg: RunConfig, st: _Stages, workers: int) -> Outputs:
    st("multimode parity")
    occ = cfg.option("occupations")
    d = cfg.option("mode_dim")
    space = HilbertSpec((d,) * len(occ), (0.1,) * len(occ))
    res = multimode_parity(fock_state(space, "down", occ).dm())
    return Outputs(summary={"p_down": res["down"], "p_up": res["up"], "total_phonons": int(sum(occ)),
                            "expected_up": int(sum(occ) % 2)})


def _exp_sbs_scan(cfg: RunConfig, st: _Stages, workers: int) -> Outputs:
    st("beam-splitter scan")
    n = cfg.option("n")
    t = np.linspace(0.0, cfg.option("t_max_us") * 1e-6, cfg.option("n_points"))
    omega = TWO_PI * 1e3 * cfg.physics.sbs_rabi_khz
    det = TWO_PI * 1e3 * cfg.option("carrier_detuning_khz") if cfg.option("carrier") else None
    res = sbs_time_scan(n[0], n[1], t, cfg.noise.model(), omega=omega, dims=tuple(cfg.physics.mode_dims),
                        lamb_dicke=tuple(cfg.physics.lamb_dicke), prepare=cfg.option("prepare"),
                        carrier_detuning=det, round_times=cfg.option("round_times"),
                        readout=cfg.option("readout"))
    cols = {"t": res["t"], "p_up": res["p_up"]}
    if n[1] == 0:
        g = cfg.physics.lamb_dicke[0] * cfg.physics.lamb_dicke[1] * omega
        cols["p_up_leading_order"] = np.atleast_1d(analytic_parity_population(n[0], g, res["t"]))
    return Outputs(tables={"sbs_scan": cols})


_RUNNERS: dict[str, Callable[[RunConfig, _Stages, int], Outputs]] = {
    "sbs-scan": _exp_sbs_scan,
    "wigner-scan": _exp_wigner_scan,
    "ecs-tomography": _exp_ecs_tomography,
    "estimate-dm": _exp_estimate_dm,
    "chsh": _exp_chsh,
    "parity-filter": _exp_parity_filter,
    "error-budget": _exp_error_budget,
    "ramsey": _exp_ramsey,
    "thermometry": _exp_thermometry,
    "lda-study": _exp_lda,
    "multimode-parity": _exp_multimode,
}


# ----------------------------------------------------------------------------
# commands


def output_directory(cfg: RunConfig, override: str | None = None) -> Path:
    return Path(override or cfg.output.directory or os.environ.get(ENV_OUTPUT) or "results")


def run(cfg: RunConfig, out_dir: str | os.PathLike | None = None, *, workers: int | None = None) -> Path:
    """Execute ``cfg`` and write its bundle; returns the bundle directory.

    Nothing is written unless the computation finishes.  Raises
    :class:`NumericalFailure` naming the stage that failed.
    """
    workers = workers or os.cpu_count() or 1
    stages = _Stages()
    t0 = time.perf_counter()
    try:
        outputs = _RUNNERS[cfg.experiment](cfg, stages, workers)
    except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalFailure(stages.current, exc) from exc
    elapsed = time.perf_counter() - t0
    dest = output_directory(cfg, out_dir)
    fmts = cfg.output.formats
    for name, grid in outputs.grids.items():
        emit_grid(grid, dest / f"grid_{name}", fmts)
    for name, cols in outputs.tables.items():
        if "csv" in fmts:
            _atomic_write(dest / f"{name}.csv", table_csv(cols))
        if "json" in fmts:
            _atomic_write(dest / f"{name}.json", table_json(cols, {"experiment": cfg.experiment}))
    _atomic_write(dest / "summary.json", json.dumps(_jsonable(outputs.summary), indent=1) + "\n")
    _atomic_write(dest / "config.ini", cfg.to_ini())
    prov = {"toolkit": "jointparity", "version": __version__,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "seed": cfg.sampling.seed, "experiment": cfg.experiment, "elapsed_s": elapsed,
            "workers": workers}
    _atomic_write(dest / "provenance.json", json.dumps(prov, indent=1) + "\n")
    return dest


def _grid_files(path: Path) -> dict[str, Path]:
    if path.is_file():
        return {path.stem: path}
    if not path.is_dir():
        raise FileNotFoundError(f"{path} does not exist")
    found: dict[str, Path] = {}
    for p in sorted(path.glob("grid_*.csv")) + sorted(path.glob("grid_*.json")):
        found.setdefault(p.stem, p)
    if not found:
        raise ValueError(f"{path} holds no grid files")
    return found


def compare(a: str | os.PathLike, b: str | os.PathLike) -> dict:
    """RMSE between congruent grids of two bundles (or two grid files).

    Reports the absolute RMSE and the RMSE as a percentage of the full
    Wigner range ``8/pi^2``.
    """
    fa, fb = _grid_files(Path(a)), _grid_files(Path(b))
    if Path(a).is_file() and Path(b).is_file():
        pairs = [("grid", fa.popitem()[1], fb.popitem()[1])]
    else:
        if set(fa) != set(fb):
            raise ValueError(f"bundles hold different grids: {sorted(fa)} vs {sorted(fb)}")
        pairs = [(k, fa[k], fb[k]) for k in sorted(fa)]
    report = {}
    full_range = 2 * FOUR_OVER_PI2
    sq, count = 0.0, 0
    for name, pa, pb in pairs:
        ga, gb = read_grid(pa), read_grid(pb)
        if ga.shape != gb.shape:
            raise ValueError(f"{name}: grid shapes differ {ga.shape} vs {gb.shape}")
        if not np.allclose(ga.betas, gb.betas, atol=1e-12):
            raise ValueError(f"{name}: grids sample different displacements")
        d = ga.values - gb.values
        rmse = float(np.sqrt(np.mean(d ** 2)))
        report[name] = {"rmse": rmse, "rmse_percent_of_range": 100 * rmse / full_range,
                        "max_abs": float(np.max(np.abs(d))), "points": int(d.size)}
        sq += float(np.sum(d ** 2))
        count += d.size
    total = math.sqrt(sq / count)
    return {"grids": report, "rmse": total, "rmse_percent_of_range": 100 * total / full_range}


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jointparity", description="Joint-parity experiment simulator.")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment described by an INI file")
    r.add_argument("config")
    r.add_argument("--output", "-o", help=f"bundle directory (default: config, then ${ENV_OUTPUT}, then ./results)")
    r.add_argument("--workers", type=int, default=None, help="worker threads for grid scans (default: all cores)")
    c = sub.add_parser("compare", help="RMSE between the grids of two bundles or grid files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--output", "-o", help="also write the report to this JSON file")
    v = sub.add_parser("validate", help="check a config file without running it")
    v.add_argument("config")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            print(f"ok: {cfg.experiment}")
            return EXIT_OK
        if args.command == "run":
            if args.workers is not None and args.workers < 1:
                raise ConfigError(["--workers: must be >= 1"])
            cfg = load_config(args.config)
            dest = run(cfg, args.output, workers=args.workers)
            print(str(dest))
            return EXIT_OK
        try:
            report = compare(args.a, args.b)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError([f"compare: {exc}"]) from exc
        text = json.dumps(report, indent=1)
        if args.output:
            _atomic_write(Path(args.output), text + "\n")
        print(text)
        return EXIT_OK
    except ConfigError as exc:
        for p in exc.problems:
            print(f"error: {p}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalFailure as exc:
        print(f"numerical failure in {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
