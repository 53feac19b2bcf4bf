"""Run configuration: INI file with one section per pipeline stage.

Unknown sections and keys are rejected with their line numbers, and all
semantic errors are collected before raising, so one pass over a broken
file reports everything that is wrong with it.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

STAGES = ("loop", "periodic", "melnikov", "reduce", "sweep", "evolve", "report")

# stage -> stages whose artifacts it reads
DEPENDENCIES = {
    "loop": (),
    "periodic": ("loop",),
    "melnikov": ("loop",),
    "reduce": ("loop", "periodic", "melnikov"),
    "sweep": ("loop", "periodic"),
    "evolve": ("loop",),
    "report": (),
}


class ConfigError(ValueError):
    """Configuration parse or validation failure; ``errors`` lists every problem."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


@dataclass
class ModelSection:
    a: float = 0.25
    epsilon: float = 0.0025
    gamma: str = "symmetric"  # or a positive number


@dataclass
class PipelineSection:
    stages: tuple = STAGES
    out: str = "fhnloop-out"
    seed: int = 0
    threads: int = 1


@dataclass
class LoopSection:
    tol: float = 1e-11
    mesh_tol: float = 1e-9
    half_length: float = 0.0  # 0: chosen from the slowest decay rate
    residual_gate: float = 1e-8


@dataclass
class PeriodicSection:
    t_targets: tuple = (120.0, 160.0, 200.0, 240.0)
    split: float = 0.5
    tol: float = 1e-11
    mesh_tol: float = 1e-9
    tube_level: float = 0.05
    closure_gate: float = 1e-9
    residual_gate: float = 1e-8
    slope_fraction: float = 0.75


@dataclass
class MelnikovSection:
    kernel_ratio: float = 100.0
    relative_limit: float = 0.1
    margin: float = 1e3


@dataclass
class ReduceSection:
    equal_tol: float = 0.05
    gray: float = 0.02
    xi_count: int = 33
    min_margin: float = 1e-8


@dataclass
class SweepSection:
    xi_count: int = 33
    modes: int = 0  # 0: proportional to the period
    fit_fraction: float = 0.25
    scaling_tol: float = 0.15
    agreement_tol: float = 0.2


@dataclass
class EvolveSection:
    period: float = 40.0
    cells: int = 64
    dt: float = 0.5
    t_end: float = 4000.0
    sampling: float = 2.0
    shape: str = "gaussian"
    amplitude: float = 1e-3
    width: float = 10.0
    center: float = 0.5
    offset: float = 10.0  # shift from center in length units; cell boundaries sit midway between back and front
    weight_u: float = 1.0
    weight_w: float = 0.0
    eps0: float = 1.0
    t_min: float = 10.0
    tail_fraction: float = 0.1
    snapshot_times: tuple = ()
    vt_exponent_range: tuple = (-0.45, -0.10)
    v_exponent_max: float = -0.5
    min_separation: float = 0.25


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    loop: LoopSection = field(default_factory=LoopSection)
    periodic: PeriodicSection = field(default_factory=PeriodicSection)
    melnikov: MelnikovSection = field(default_factory=MelnikovSection)
    reduce: ReduceSection = field(default_factory=ReduceSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    evolve: EvolveSection = field(default_factory=EvolveSection)

    def section(self, name):
        return getattr(self, name)

    def subset(self, *names) -> dict:
        """Plain-dict view of some sections (used for content hashing)."""
        return {n: dataclasses.asdict(getattr(self, n)) for n in names}

    def gamma_value(self) -> float:
        from .model import symmetric_gamma

        if str(self.model.gamma).strip().lower() == "symmetric":
            return symmetric_gamma(self.model.a)
        return float(self.model.gamma)


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _field_types(section_cls):
    return {f.name: f.default for f in fields(section_cls)}


def _convert(raw: str, default):
    """Convert a raw string to the type of the field's default."""
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw.strip())
    if isinstance(default, float):
        return float(raw.strip())
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.replace("\n", ",").split(",") if s.strip()]
        if default and isinstance(default[0], str):
            return tuple(items)
        if default == () or isinstance(default[0], float):
            return tuple(float(s) for s in items)
        return tuple(items)
    return raw.strip()


def _line_index(text: str) -> dict:
    """(section, key) -> line number and section -> header line number."""
    where = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            where.setdefault((section, None), lineno)
        elif section is not None and not line[:1].isspace():
            for sep in ("=", ":"):
                if sep in s:
                    key = s.split(sep, 1)[0].strip().lower()
                    where.setdefault((section, key), lineno)
                    break
    return where


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.DuplicateSectionError as exc:
        raise ConfigError([f"{source}:{exc.lineno}: duplicate section [{exc.section}]"]) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError([f"{source}:{exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]"]) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError([f"{source}:{exc.lineno}: key outside of any [section]"]) from None
    except configparser.ParsingError as exc:
        raise ConfigError([f"{source}:{lineno}: cannot parse {line!r}" for lineno, line in exc.errors]) from None
    where = _line_index(text)
    errors = []
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            errors.append(f"{source}:{where.get((section, None), '?')}: unknown section [{section}]")
            continue
        obj = getattr(cfg, section)
        types = _field_types(type(obj))
        for key, raw in parser.items(section):
            line = where.get((section, key), "?")
            if key not in types:
                errors.append(f"{source}:{line}: unknown key {key!r} in [{section}]")
                continue
            try:
                setattr(obj, key, _convert(raw, types[key]))
            except ValueError as exc:
                errors.append(f"{source}:{line}: [{section}] {key}: {exc}")
    errors.extend(validate(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"{path}: no such file"])
    return parse_config_text(path.read_text(), str(path))


def validate(cfg: RunConfig) -> list:
    """Every semantic problem with the configuration, as messages naming the key."""
    errors = []

    def positive(section, key, strict=True):
        v = getattr(getattr(cfg, section), key)
        ok = v > 0 if strict else v >= 0
        if not (isinstance(v, (int, float)) and math.isfinite(v) and ok):
            errors.append(f"[{section}] {key} must be {'positive' if strict else 'non-negative'}, got {v!r}")

    m = cfg.model
    if not 0.0 < m.a < 0.5:
        errors.append(f"[model] a must lie in (0, 1/2), got {m.a!r}")
    if not m.epsilon > 0:
        errors.append(f"[model] epsilon must be positive, got {m.epsilon!r}")
    if str(m.gamma).strip().lower() != "symmetric":
        try:
            if not float(m.gamma) > 0:
                raise ValueError
        except ValueError:
            errors.append(f"[model] gamma must be 'symmetric' or a positive number, got {m.gamma!r}")
    p = cfg.pipeline
    unknown = [s for s in p.stages if s not in STAGES]
    if unknown:
        errors.append(f"[pipeline] stages: unknown stage(s) {', '.join(unknown)}")
    if not p.stages:
        errors.append("[pipeline] stages must not be empty")
    if p.threads < 1:
        errors.append(f"[pipeline] threads must be at least 1, got {p.threads!r}")
    for key in ("tol", "mesh_tol", "residual_gate"):
        positive("loop", key)
    positive("loop", "half_length", strict=False)
    for key in ("tol", "mesh_tol", "tube_level", "closure_gate", "residual_gate", "slope_fraction"):
        positive("periodic", key)
    if not 0.0 < cfg.periodic.split < 1.0:
        errors.append(f"[periodic] split must lie in (0, 1), got {cfg.periodic.split!r}")
    if len(cfg.periodic.t_targets) < 3:
        errors.append("[periodic] t_targets needs at least three periods")
    elif any(not (t > 0 and math.isfinite(t)) for t in cfg.periodic.t_targets):
        errors.append("[periodic] t_targets must be positive")
    elif max(cfg.periodic.t_targets) < 2.0 * min(cfg.periodic.t_targets):
        errors.append("[periodic] t_targets must span a factor of at least 2")
    for key in ("kernel_ratio", "relative_limit", "margin"):
        positive("melnikov", key)
    for key in ("equal_tol", "gray", "min_margin"):
        positive("reduce", key)
    for section in ("reduce", "sweep"):
        n = getattr(cfg, section).xi_count
        if n < 33 or n % 2 == 0:
            errors.append(f"[{section}] xi_count must be odd and at least 33, got {n!r}")
    positive("sweep", "modes", strict=False)
    for key in ("fit_fraction", "scaling_tol", "agreement_tol"):
        positive("sweep", key)
    e = cfg.evolve
    for key in ("period", "dt", "t_end", "sampling", "width", "eps0", "tail_fraction"):
        positive("evolve", key)
    positive("evolve", "amplitude", strict=False)
    positive("evolve", "t_min", strict=False)
    if e.cells < 1:
        errors.append(f"[evolve] cells must be at least 1, got {e.cells!r}")
    if e.shape not in ("gaussian", "compact-bump"):
        errors.append(f"[evolve] shape must be 'gaussian' or 'compact-bump', got {e.shape!r}")
    if not 0.0 <= e.center <= 1.0:
        errors.append(f"[evolve] center must lie in [0, 1], got {e.center!r}")
    if e.sampling < e.dt:
        errors.append("[evolve] sampling must not be shorter than dt")
    if len(e.vt_exponent_range) != 2 or e.vt_exponent_range[0] >= e.vt_exponent_range[1]:
        errors.append("[evolve] vt_exponent_range must be two increasing numbers")
    if any(t < 0 or t > e.t_end for t in e.snapshot_times):
        errors.append("[evolve] snapshot_times must lie in [0, t_end]")
    return errors


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(cfg: RunConfig) -> str:
    """INI text that parses back to an equal configuration."""
    out = []
    for name in SECTIONS:
        out.append(f"[{name}]")
        for f in fields(getattr(cfg, name)):
            out.append(f"{f.name} = {_format(getattr(getattr(cfg, name), f.name))}")
        out.append("")
    return "\n".join(out)


def dependency_closure(stages) -> list:
    """Requested stages plus everything they depend on, in pipeline order."""
    need = set()

    def add(s):
        if s in need:
            return
        need.add(s)
        for d in DEPENDENCIES[s]:
            add(d)

    for s in stages:
        add(s)
    return [s for s in STAGES if s in need]
