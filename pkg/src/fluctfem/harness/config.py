"""Flat ``key = value`` run configurations.

One key per line, ``#`` starts a comment. Command-line ``--key value`` flags
override file values. Sweep files use the same format; axis keys take
comma-separated lists.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..noise import NOISE_MODES
from ..assembly import PERIODIC_MODES

OUTPUT_ENV = "FLUCTFEM_OUTPUT_ROOT"
MODELS = ("second_order", "fourth_order")


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None, source=None):
        where = []
        if source is not None:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int(s: str) -> int:
    x = float(s)
    if x != int(x):
        raise ValueError(f"not an integer: {s!r}")
    return int(x)


_PARSERS = {int: _parse_int, float: float, str: str, bool: _parse_bool}


@dataclass(frozen=True)
class RunConfig:
    model: str = "second_order"
    L: float = 1.0
    D_coeff: float = 1.0
    u0: float = 10000.0
    ell0: float | None = None
    N_e: int = 50
    p: int = 1
    alpha: float = 0.5
    dt: float = 1e-4
    N_burn: int | None = None
    N_t: int = 100000
    thinning: int = 1
    seed: int = 0
    noise: str | None = None
    epsilon: float = 1e-5
    periodic_mode: str = "wrapped"
    output: str | None = None
    export_states: bool = False
    dyn_mode: int | None = None
    dyn_max_lag: int = 0

    def __post_init__(self):
        if self.noise is None:
            default = "nonlinear_quadrature" if self.model == "second_order" else "linearized_decomposition"
            object.__setattr__(self, "noise", default)
        validate(self)

    @property
    def noise_mode(self) -> str:
        return self.noise

    def run_dir(self) -> Path:
        if self.output:
            return Path(self.output)
        root = Path(os.environ.get(OUTPUT_ENV, "runs"))
        name = f"{self.model}_p{self.p}_Ne{self.N_e}_a{self.alpha:g}_dt{self.dt:g}_s{self.seed}"
        return root / name

    def echo(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_type(name: str):
    hints = {
        "model": str, "L": float, "D_coeff": float, "u0": float, "ell0": float, "N_e": int, "p": int,
        "alpha": float, "dt": float, "N_burn": int, "N_t": int, "thinning": int, "seed": int,
        "noise": str, "epsilon": float, "periodic_mode": str, "output": str,
        "export_states": bool, "dyn_mode": int, "dyn_max_lag": int,
    }
    return hints[name]


RUN_KEYS = tuple(f.name for f in fields(RunConfig))


def validate(c: RunConfig) -> None:
    if c.model not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}", "model")
    for key in ("L", "D_coeff", "u0", "dt"):
        v = getattr(c, key)
        if not (v > 0 and math.isfinite(v)):
            raise ConfigError("must be positive and finite", key)
    if not 0.0 <= c.alpha <= 1.0:
        raise ConfigError("must lie in [0, 1]", "alpha")
    if c.p not in (1, 2):
        raise ConfigError("element order must be 1 or 2", "p")
    if c.N_e < 2:
        raise ConfigError("need at least 2 elements", "N_e")
    if c.N_t < 1:
        raise ConfigError("must be >= 1", "N_t")
    if c.N_burn is not None and c.N_burn < 0:
        raise ConfigError("must be >= 0", "N_burn")
    if c.thinning < 1:
        raise ConfigError("must be >= 1", "thinning")
    if c.epsilon < 0:
        raise ConfigError("must be >= 0", "epsilon")
    if c.noise not in NOISE_MODES:
        raise ConfigError(f"must be one of {NOISE_MODES}", "noise")
    if c.periodic_mode not in PERIODIC_MODES:
        raise ConfigError(f"must be one of {PERIODIC_MODES}", "periodic_mode")
    if c.model == "fourth_order":
        if c.ell0 is None or not c.ell0 > 0:
            raise ConfigError("fourth_order needs a positive ell0", "ell0")
        if c.noise == "nonlinear_quadrature":
            raise ConfigError("fourth_order uses linearized noise only", "noise")
        if c.periodic_mode != "wrapped":
            raise ConfigError("fourth_order supports wrapped periodic mode only", "periodic_mode")
    elif c.ell0 is not None:
        raise ConfigError("ell0 applies to fourth_order only", "ell0")
    if c.dyn_mode is not None:
        if c.dyn_mode < 1:
            raise ConfigError("must be >= 1 (mode index of k = 2 pi j / L)", "dyn_mode")
        if c.dyn_max_lag < 1 or c.dyn_max_lag >= c.N_t // c.thinning:
            raise ConfigError("must be in [1, N_t / thinning)", "dyn_max_lag")


def read_pairs(path) -> list[tuple[str, str, int]]:
    """``(key, raw value, line number)`` triples from a config file."""
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("expected 'key = value'", line=lineno, source=path)
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ConfigError("empty key", line=lineno, source=path)
            out.append((key, value, lineno))
    return out


def convert(key: str, value: str, line=None, source=None):
    if key not in RUN_KEYS:
        raise ConfigError("unknown key", key, line, source)
    if value.lower() in ("", "none"):
        return None
    try:
        return _PARSERS[_field_type(key)](value)
    except ValueError as exc:
        raise ConfigError(str(exc), key, line, source) from None


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    lines = {}
    if path is not None:
        for key, value, lineno in read_pairs(path):
            values[key] = convert(key, value, lineno, path)
            lines[key] = lineno
    for key, value in (overrides or {}).items():
        values[key] = convert(key, value) if isinstance(value, str) else value
        lines.pop(key, None)
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        if exc.key in lines:
            raise ConfigError(str(exc).split(": ", 1)[-1], exc.key, lines[exc.key], path) from None
        raise


SWEEP_AXES = ("N_e", "alpha", "dt", "dx_over_ell0")
SWEEP_KEYS = ("replications", "max_cells", "workers", "sweep_mode")


@dataclass(frozen=True)
class SweepConfig:
    base: RunConfig
    axes: dict = field(default_factory=dict)
    replications: int = 1
    max_cells: int = 64
    workers: int = 1
    sweep_mode: str = "oracle"

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("must be >= 1", "replications")
        if self.sweep_mode not in ("oracle", "simulate"):
            raise ConfigError("must be 'oracle' or 'simulate'", "sweep_mode")
        if self.size > self.max_cells:
            raise ConfigError(f"sweep has {self.size} cells, cap is {self.max_cells}", "max_cells")
        if "dx_over_ell0" in self.axes and self.base.model != "fourth_order":
            raise ConfigError("dx_over_ell0 axis needs model = fourth_order", "dx_over_ell0")

    @property
    def size(self) -> int:
        n = self.replications
        for v in self.axes.values():
            n *= len(v)
        return n


def load_sweep_config(path=None, overrides: dict | None = None) -> SweepConfig:
    run_values, axes, extra = {}, {}, {}
    pairs = read_pairs(path) if path is not None else []
    pairs += [(k, v, None) for k, v in (overrides or {}).items()]
    for key, value, lineno in pairs:
        value = str(value)
        if key in SWEEP_KEYS:
            try:
                extra[key] = value if key == "sweep_mode" else _parse_int(value)
            except ValueError as exc:
                raise ConfigError(str(exc), key, lineno, path) from None
        elif key == "dx_over_ell0":
            try:
                axes[key] = [float(x) for x in value.split(",")]
            except ValueError as exc:
                raise ConfigError(str(exc), key, lineno, path) from None
        elif key in SWEEP_AXES and "," in value:
            axes[key] = [convert(key, x.strip(), lineno, path) for x in value.split(",")]
        else:
            run_values[key] = convert(key, value, lineno, path)
    if "dx_over_ell0" in axes and "ell0" not in run_values:
        run_values["ell0"] = 1.0  # placeholder, replaced per cell
    base = RunConfig(**run_values)
    return SweepConfig(base, axes, **extra)
