"""Run configuration: typed defaults and a validating INI parser.

The text format is INI-like. Keys live in sections::

    [hydro]
    dt = 0.5

and the same key may also be written as a dotted path before any section
header (``hydro.dt = 0.5``). Unknown sections or keys are errors. An empty
document yields the reference setup for the selected case; the neighbor
count and element target default to 35 and 1215 for the uncoupled case and
to 30 and 1175 for the coupled case unless given explicitly.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import mwls
from .errors import ConfigError
from .hydrodynamics import HydroConfig, RunConfig
from .model import COUPLED, UNCOUPLED, PhysicalParams, SuperpositionParams
from .oracle import OracleGrid

CASE_DEFAULTS = {
    False: {"n_b": 35, "n_elements_target": 1215},
    True: {"n_b": 30, "n_elements_target": 1175},
}
RUN_WEIGHT_SCALE = 0.3
_ROOT = "__root__"


@dataclass(frozen=True)
class OracleSettings:
    grid: OracleGrid = OracleGrid()
    dt: float = 0.5

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("oracle.dt must be positive")


@dataclass(frozen=True)
class OutputSettings:
    directory: str = "out"
    snapshot_stride: int = 1
    threads: int = 0  # 0 means all cores

    def __post_init__(self):
        if self.snapshot_stride < 1:
            raise ConfigError("output.snapshot_stride must be at least 1")
        if self.threads < 0:
            raise ConfigError("output.threads must be non-negative")

    @property
    def thread_count(self) -> int:
        return self.threads or (os.cpu_count() or 1)


@dataclass(frozen=True)
class Settings:
    run: RunConfig
    oracle: OracleSettings
    output: OutputSettings

    @property
    def coupled(self) -> bool:
        return self.run.case.coupled


# section -> key -> value kind
_SCHEMA = {
    "physical": {"m0": float, "m": float, "omega": float, "c": float},
    "superposition": {"a": float, "beta": float},
    "case": {"coupled": "bool"},
    "hydro": {
        "n_elements_target": int, "dt": float, "regrid_interval": float,
        "density_cutoff": float, "domain": "domain", "t_final": float,
        "mesh_aspect": float, "n_trajectories": int,
    },
    "mwls": {"n_b": int, "weight_scale": float},
    "oracle": {"nx": int, "ny": int, "dt": float},
    "output": {"directory": str, "snapshot_stride": int, "threads": int},
}


def _convert(kind, raw: str, key: str):
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind == "domain":
            parts = [float(p) for p in text.replace(",", " ").split()]
            if len(parts) != 4:
                raise ValueError("expected four numbers x0 x1 y0 y1")
            return ((parts[0], parts[1]), (parts[2], parts[3]))
        if kind is int:
            value = float(text)
            if value != int(value):
                raise ValueError("not an integer")
            return int(value)
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"invalid value for {key}: {raw!r} ({exc})") from None


def _describe(exc: configparser.Error) -> str:
    # line numbers are shifted back past the synthetic root header
    if isinstance(exc, configparser.ParsingError):
        return "; ".join(f"line {n - 1}: cannot parse {line.strip()!r}" for n, line in exc.errors)
    if isinstance(exc, configparser.DuplicateOptionError):
        return f"line {exc.lineno - 1}: key {exc.section}.{exc.option} given twice"
    if isinstance(exc, configparser.DuplicateSectionError):
        return f"line {exc.lineno - 1}: section [{exc.section}] given twice"
    return exc.message


def parse_config_text(text: str) -> dict[str, dict[str, object]]:
    """Parse text into ``{section: {key: value}}`` with typed values."""
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), default_section="__defaults__",
    )
    parser.optionxform = str
    try:
        parser.read_string(f"[{_ROOT}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {_describe(exc)}") from None
    out: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if section == _ROOT:
                if "." not in key:
                    raise ConfigError(f"key {key!r} outside a section must be a dotted path")
                sec, name = key.split(".", 1)
            else:
                sec, name = section, key
            path = f"{sec}.{name}"
            if sec not in _SCHEMA or name not in _SCHEMA[sec]:
                raise ConfigError(f"unknown config key {path!r}")
            if name in out.get(sec, {}):
                raise ConfigError(f"config key {path!r} given twice")
            out.setdefault(sec, {})[name] = _convert(_SCHEMA[sec][name], raw, path)
    return out


def build_settings(values: dict[str, dict[str, object]], coupled: bool | None = None) -> Settings:
    """Apply ``values`` over the defaults. ``coupled`` overrides ``case.coupled``."""
    case_flag = values.get("case", {}).get("coupled", False)
    if coupled is not None:
        case_flag = coupled
    case = COUPLED if case_flag else UNCOUPLED
    defaults = CASE_DEFAULTS[case.coupled]
    try:
        phys = PhysicalParams(**values.get("physical", {}))
        sup = SuperpositionParams(**values.get("superposition", {}))
        h = dict(values.get("hydro", {}))
        h.setdefault("n_elements_target", defaults["n_elements_target"])
        hydro = HydroConfig(**h)
        m = dict(values.get("mwls", {}))
        m.setdefault("n_b", defaults["n_b"])
        m.setdefault("weight_scale", RUN_WEIGHT_SCALE)
        mcfg = mwls.MwlsConfig(**m)
        o = dict(values.get("oracle", {}))
        grid = OracleGrid(
            nx=o.pop("nx", 256), ny=o.pop("ny", 256),
            xlim=hydro.domain[0], ylim=hydro.domain[1],
        )
        oracle = OracleSettings(grid=grid, **o)
        output = OutputSettings(**values.get("output", {}))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return Settings(RunConfig(phys, sup, case, hydro, mcfg), oracle, output)


def load_config(source: str | os.PathLike | None = None, coupled: bool | None = None) -> Settings:
    """Load settings from a file path, inline text, or nothing (defaults).

    A ``str`` naming an existing file is read as a path; any other string
    is parsed as configuration text.
    """
    if source is None:
        text = ""
    elif isinstance(source, os.PathLike) or (isinstance(source, str) and "\n" not in source and Path(source).is_file()):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {source}: {exc}") from None
    else:
        text = str(source)
    return build_settings(parse_config_text(text), coupled)


def dump_config(settings: Settings) -> str:
    """Complete, re-loadable text of the effective settings."""
    r = settings.run
    (x0, x1), (y0, y1) = r.hydro.domain
    lines = []

    def section(name, items):
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in items)
        lines.append("")

    section("physical", [(f.name, repr(getattr(r.phys, f.name))) for f in fields(r.phys) if f.name != "hbar"])
    section("superposition", [("a", repr(r.sup.a)), ("beta", repr(r.sup.beta))])
    section("case", [("coupled", "true" if r.case.coupled else "false")])
    h = r.hydro
    section("hydro", [
        ("n_elements_target", h.n_elements_target), ("dt", repr(h.dt)),
        ("regrid_interval", repr(h.regrid_interval)), ("density_cutoff", repr(h.density_cutoff)),
        ("domain", f"{x0!r} {x1!r} {y0!r} {y1!r}"), ("t_final", repr(h.t_final)),
        ("mesh_aspect", repr(h.mesh_aspect)), ("n_trajectories", h.n_trajectories),
    ])
    section("mwls", [("n_b", r.mwls.n_b), ("weight_scale", repr(r.mwls.weight_scale))])
    g = settings.oracle.grid
    section("oracle", [("nx", g.nx), ("ny", g.ny), ("dt", repr(settings.oracle.dt))])
    o = settings.output
    section("output", [("directory", o.directory), ("snapshot_stride", o.snapshot_stride), ("threads", o.threads)])
    return "\n".join(lines)


def with_output(settings: Settings, **changes) -> Settings:
    return replace(settings, output=replace(settings.output, **changes))
