"""Declarative run configuration: strict TOML parsing and the resolved (defaults-filled) form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .data import SyntheticSpec, generate_synthetic, load_csv_dataset, split_incremental
from .errors import InvalidConfig
from .runner import AblationConfig, HyperParams

SECTIONS = ("synthetic", "csv", "hyperparams", "ablation", "run", "grid")
CSV_DEFAULTS = {"path": "", "label_column": "label", "num_tasks": 5,
                "first_task_fraction": "equal", "seed": 0, "test_fraction": 0.2}
RUN_DEFAULTS = {"seeds": [0], "oracle_diagnostics": False, "checkpoints": True, "out": ""}
GRID_KEYS = ("preset", "classifier", "adapt_mode", "anticollapse", "shrink", "distillation")
ANTICOLLAPSE_MODES = ("on", "off")

# Component ablation rows, top to bottom: (classifier, adapt_mode, anticollapse, shrink).
COMPONENT_CELLS = (
    ("nmc", "mean_only", True, 0.0),
    ("nmc", "full", True, 0.0),
    ("bayes_diag", "full", True, 0.0),
    ("bayes_full", "none", False, 0.5),
    ("bayes_full", "cov_only", True, 0.0),
    ("bayes_full", "mean_only", True, 0.0),
    ("bayes_full", "full", False, 0.5),
    ("bayes_full", "full", True, 0.0),
)


def _defaults(cls, skip=()):
    return {f.name: _plain(f.default) for f in dataclasses.fields(cls) if f.name not in skip}


def _plain(value):
    return list(value) if isinstance(value, tuple) else value


def _check_type(key, value, default):
    """Accept ``value`` if it has the same TOML type as ``default`` (ints pass for floats)."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise InvalidConfig(f"key '{key}' has type {type(value).__name__}, expected {type(default).__name__}")
    return float(value) if isinstance(default, float) else value


def _merge(section, raw, defaults, loose=()):
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise InvalidConfig(f"unknown key '{section}.{unknown[0]}'; allowed: {sorted(defaults)}")
    out = dict(defaults)
    for key, value in raw.items():
        out[key] = value if key in loose else _check_type(f"{section}.{key}", value, defaults[key])
    return out


@dataclass
class GridCell:
    classifier: str
    adapt_mode: str
    anticollapse: bool
    shrink: float
    distillation: str

    @property
    def label(self):
        ac = "on" if self.anticollapse else "off"
        return f"{self.classifier}|{self.adapt_mode}|ac_{ac}|shrink_{self.shrink:g}|{self.distillation}"


@dataclass
class RunConfig:
    dataset: str
    dataset_params: dict
    hyperparams: dict
    ablation: dict
    run: dict
    grid: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @property
    def seeds(self):
        return list(self.run["seeds"])

    def hp(self, seed) -> HyperParams:
        return HyperParams(**self.hyperparams, seed=seed)

    def ablation_config(self, **override) -> AblationConfig:
        return AblationConfig(**{**self.ablation, **override})

    def build_stream(self):
        if self.dataset == "synthetic":
            return generate_synthetic(SyntheticSpec(**self.dataset_params))
        p = self.dataset_params
        samples = load_csv_dataset(p["path"], p["label_column"], p["seed"], p["test_fraction"])
        return split_incremental(samples, p["num_tasks"], p["first_task_fraction"], p["seed"])

    def grid_cells(self):
        """Deterministic grid order: a preset's row order, else the Cartesian product in key order."""
        g = self.grid
        if g.get("preset"):
            return [GridCell(c, a, ac, s, self.ablation["distillation"]) for c, a, ac, s in COMPONENT_CELLS]
        cells = []
        for clf in g["classifier"]:
            for mode in g["adapt_mode"]:
                for ac in g["anticollapse"]:
                    for shrink in g["shrink"]:
                        for dist in g["distillation"]:
                            cells.append(GridCell(clf, mode, ac == "on", float(shrink), dist))
        return cells

    def resolved(self) -> dict:
        """All sections with every default materialized; feeding it back reproduces the run."""
        out = {self.dataset: dict(self.dataset_params),
               "hyperparams": dict(self.hyperparams),
               "ablation": dict(self.ablation),
               "run": dict(self.run)}
        if self.grid:
            out["grid"] = dict(self.grid)
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.resolved())


def parse_config(data: dict, base_dir=Path(".")) -> RunConfig:
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise InvalidConfig(f"unknown section '{unknown[0]}'; allowed: {list(SECTIONS)}")
    for name, section in data.items():
        if not isinstance(section, dict):
            raise InvalidConfig(f"'{name}' must be a table")
    sources = [s for s in ("synthetic", "csv") if s in data]
    if len(sources) != 1:
        raise InvalidConfig(f"exactly one dataset section ([synthetic] or [csv]) is required, got {sources}")
    dataset = sources[0]
    if dataset == "synthetic":
        params = _merge("synthetic", data["synthetic"], _defaults(SyntheticSpec),
                        loose=("first_task_fraction",))
        _build(SyntheticSpec, params, "synthetic")
    else:
        params = _merge("csv", data["csv"], CSV_DEFAULTS, loose=("label_column", "first_task_fraction"))
        if not params["path"]:
            raise InvalidConfig("key 'csv.path' is required")
        path = Path(params["path"])
        params["path"] = str(path if path.is_absolute() else (Path(base_dir) / path).resolve())
        if not isinstance(params["label_column"], (str, int)) or isinstance(params["label_column"], bool):
            raise InvalidConfig("key 'csv.label_column' must be a column name or index")
    hyper = _merge("hyperparams", data.get("hyperparams", {}), _defaults(HyperParams, skip=("seed",)))
    _build(HyperParams, hyper, "hyperparams")
    ablation = _merge("ablation", data.get("ablation", {}), _defaults(AblationConfig))
    _build(AblationConfig, ablation, "ablation")
    run = _merge("run", data.get("run", {}), RUN_DEFAULTS)
    seeds = run["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise InvalidConfig("key 'run.seeds' must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise InvalidConfig("key 'run.seeds' has duplicates")
    grid = _parse_grid(data["grid"], ablation) if "grid" in data else {}
    return RunConfig(dataset, params, hyper, ablation, run, grid, Path(base_dir))


def _build(cls, params, section):
    try:
        return cls(**params)
    except InvalidConfig as exc:
        raise InvalidConfig(f"[{section}] {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"[{section}] {exc}") from None


def _parse_grid(raw, ablation):
    unknown = sorted(set(raw) - set(GRID_KEYS))
    if unknown:
        raise InvalidConfig(f"unknown key 'grid.{unknown[0]}'; allowed: {list(GRID_KEYS)}")
    preset = raw.get("preset", "")
    if preset not in ("", "components"):
        raise InvalidConfig(f"key 'grid.preset' must be 'components', got {preset!r}")
    grid = {"preset": preset}
    defaults = {
        "classifier": [ablation["classifier"]],
        "adapt_mode": [ablation["adapt_mode"]],
        "anticollapse": ["on" if ablation["anticollapse"] else "off"],
        "shrink": [ablation["shrink"]],
        "distillation": [ablation["distillation"]],
    }
    for key, default in defaults.items():
        values = raw.get(key, default)
        if not isinstance(values, list):
            raise InvalidConfig(f"key 'grid.{key}' must be a list")
        if not values:
            raise InvalidConfig(f"key 'grid.{key}' is an empty grid dimension")
        if preset and key in raw and key != "distillation":
            raise InvalidConfig(f"key 'grid.{key}' cannot be combined with a preset")
        grid[key] = list(values)
    for mode in grid["anticollapse"]:
        if mode not in ANTICOLLAPSE_MODES:
            raise InvalidConfig(f"key 'grid.anticollapse' values must be in {ANTICOLLAPSE_MODES}, got {mode!r}")
    for clf in grid["classifier"]:
        for mode in grid["adapt_mode"]:
            for shrink in grid["shrink"]:
                for dist in grid["distillation"]:
                    _build(AblationConfig, {**ablation, "classifier": clf, "adapt_mode": mode,
                                            "shrink": shrink, "distillation": dist}, "grid")
    return grid


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = tomli.loads(path.read_text())
    except FileNotFoundError:
        raise InvalidConfig(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    return parse_config(data, path.parent)
