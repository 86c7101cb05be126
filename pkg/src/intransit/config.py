"""Study configuration: one INI-style ``.cfg`` file shared by every process.

Example::

    [study]
    study_id = demo
    n_sims = 200
    seed = 2024
    n_timesteps = 100
    fields = dye

    [mesh]
    nx = 64
    ny = 32

    [statistics]
    quantile_orders = percentiles      ; or a comma list such as 0.05, 0.5, 0.95
    thresholds = 0.1, 0.5
    gain_c = 1.0
    schedule = linear                  ; or constant:0.7
    clamp = true                       ; project estimates onto the running sample range

    [simulation]
    length = 2.0
    height = 1.0
    velocity = 10.0
    diffusivity = 0.02
    t_end = 0.2
    obstacles = 0.6:0.3:0.12, 1.0:0.7:0.12, 1.4:0.3:0.12   ; x:y:radius
    step_delay = 0.0                   ; wall-clock pause per output step

    [server]
    n_ranks = 2
    checkpoint_period = 5.0
    heartbeat_period = 0.5
    idle_timeout = 30.0
    queue_size = 64
    store_raw = false
    log_messages = false

    [launcher]
    max_concurrent = 4
    retry_budget = 3
    heartbeat_timeout = 10.0
    poll_period = 0.05
    sim_wall_limit = 300.0
    max_server_restarts = 3
    cap_schedule =                     ; e.g. "20:2" -> cap 2 once 20 sims are done

    [output]
    directory = out

Every key is optional and falls back to the defaults above, except that the
``INTRANSIT_OUTPUT_DIR`` environment variable overrides ``output.directory``.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .stats_core import StatisticsConfig, parse_schedule, percentile_orders

OUTPUT_ENV = "INTRANSIT_OUTPUT_DIR"

# dataclass field -> (section, key)
_LAYOUT = {
    "study_id": "study",
    "n_sims": "study",
    "seed": "study",
    "n_timesteps": "study",
    "fields": "study",
    "nx": "mesh",
    "ny": "mesh",
    "quantile_orders": "statistics",
    "thresholds": "statistics",
    "gain_c": "statistics",
    "schedule": "statistics",
    "clamp": "statistics",
    "length": "simulation",
    "height": "simulation",
    "velocity": "simulation",
    "diffusivity": "simulation",
    "t_end": "simulation",
    "obstacles": "simulation",
    "step_delay": "simulation",
    "n_ranks": "server",
    "checkpoint_period": "server",
    "heartbeat_period": "server",
    "idle_timeout": "server",
    "queue_size": "server",
    "store_raw": "server",
    "log_messages": "server",
    "max_concurrent": "launcher",
    "retry_budget": "launcher",
    "heartbeat_timeout": "launcher",
    "poll_period": "launcher",
    "sim_wall_limit": "launcher",
    "max_server_restarts": "launcher",
    "cap_schedule": "launcher",
    "output_dir": "output",
}
_KEY_ALIASES = {"output_dir": "directory"}

# parts of the config that change the meaning of stored statistics
_HASHED = ("study_id", "n_sims", "n_timesteps", "fields", "nx", "ny", "quantile_orders",
           "thresholds", "gain_c", "schedule", "clamp", "n_ranks")


@dataclass(frozen=True)
class StudyConfig:
    study_id: str = "study"
    n_sims: int = 200
    seed: int = 2024
    n_timesteps: int = 100
    fields: tuple[str, ...] = ("dye",)
    nx: int = 64
    ny: int = 32
    quantile_orders: tuple[float, ...] = field(default_factory=percentile_orders)
    thresholds: tuple[float, ...] = (0.1, 0.5)
    gain_c: float = 1.0
    schedule: str = "linear"
    clamp: bool = True
    length: float = 2.0
    height: float = 1.0
    velocity: float = 10.0
    diffusivity: float = 0.02
    t_end: float = 0.2
    obstacles: tuple[tuple[float, float, float], ...] = ((0.6, 0.3, 0.12), (1.0, 0.7, 0.12), (1.4, 0.3, 0.12))
    step_delay: float = 0.0
    n_ranks: int = 2
    checkpoint_period: float = 5.0
    heartbeat_period: float = 0.5
    idle_timeout: float = 30.0
    queue_size: int = 64
    store_raw: bool = False
    log_messages: bool = False
    max_concurrent: int = 4
    retry_budget: int = 3
    heartbeat_timeout: float = 10.0
    poll_period: float = 0.05
    sim_wall_limit: float = 300.0
    max_server_restarts: int = 3
    cap_schedule: tuple[tuple[int, int], ...] = ()
    output_dir: str = "out"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, what: str) -> None:
            if not ok:
                raise ConfigError(what)

        need(self.n_sims >= 1, f"n_sims must be >= 1, got {self.n_sims}")
        need(self.n_sims >= 2, "n_sims must be >= 2 (the quantile step schedule needs N >= 2)")
        need(self.n_timesteps >= 1, "n_timesteps must be >= 1")
        need(len(self.fields) >= 1 and len(set(self.fields)) == len(self.fields), "fields must be unique and non-empty")
        need(self.nx >= 2 and self.ny >= 2, "mesh must be at least 2x2")
        need(1 <= self.n_ranks <= self.nx * self.ny, "n_ranks must be in [1, n_cells]")
        need(self.max_concurrent >= 1, "max_concurrent must be >= 1")
        need(self.retry_budget >= 0, "retry_budget must be >= 0")
        need(self.queue_size >= 1, "queue_size must be >= 1")
        need(self.t_end > 0 and self.velocity >= 0 and self.diffusivity >= 0, "bad simulation parameters")
        for name in ("checkpoint_period", "heartbeat_period", "idle_timeout", "heartbeat_timeout", "poll_period",
                     "sim_wall_limit"):
            need(getattr(self, name) > 0, f"{name} must be positive")
        self.statistics()  # validates orders, thresholds, gain and schedule

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def statistics(self) -> StatisticsConfig:
        return StatisticsConfig(
            declared_n=self.n_sims,
            quantile_orders=self.quantile_orders,
            thresholds=self.thresholds,
            gain_c=self.gain_c,
            schedule=parse_schedule(self.schedule),
            clamp=self.clamp,
        )

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def replace(self, **changes: Any) -> "StudyConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def config_hash(self) -> bytes:
        subset = {k: getattr(self, k) for k in _HASHED}
        return hashlib.sha256(json.dumps(subset, sort_keys=True).encode()).digest()

    # -- text form ---------------------------------------------------------------

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for f in fields(self):
            section = _LAYOUT[f.name]
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, _KEY_ALIASES.get(f.name, f.name), _format(getattr(self, f.name)))
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp.items(section)]
            lines.append("")
        return "\n".join(lines)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_text(cls, text: str, **overrides: Any) -> "StudyConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from None
        known = {(s, _KEY_ALIASES.get(n, n)) for n, s in _LAYOUT.items()}
        for section in cp.sections():
            for key in cp[section]:
                if (section, key) not in known:
                    raise ConfigError(f"unknown config key [{section}] {key}")
        values: dict[str, Any] = {}
        for f in fields(cls):
            section, key = _LAYOUT[f.name], _KEY_ALIASES.get(f.name, f.name)
            if cp.has_option(section, key):
                raw = cp.get(section, key).strip()
                try:
                    values[f.name] = _parse(f.name, raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from None
        values.update({k: v for k, v in overrides.items() if v is not None})
        env_dir = os.environ.get(OUTPUT_ENV)
        if env_dir:
            values["output_dir"] = env_dir
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | os.PathLike, **overrides: Any) -> "StudyConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, **overrides)


_INTS = {"n_sims", "seed", "n_timesteps", "nx", "ny", "n_ranks", "queue_size", "max_concurrent", "retry_budget",
         "max_server_restarts"}
_FLOATS = {"gain_c", "step_delay", "length", "height", "velocity", "diffusivity", "t_end", "checkpoint_period",
           "heartbeat_period", "idle_timeout", "heartbeat_timeout", "poll_period", "sim_wall_limit"}
_BOOLS = {"store_raw", "log_messages", "clamp"}


def _split(raw: str) -> list[str]:
    return [p.strip() for p in raw.split(",") if p.strip()]


def _parse(name: str, raw: str) -> Any:
    if name in _INTS:
        return int(raw)
    if name in _FLOATS:
        return float(raw)
    if name in _BOOLS:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if name == "fields":
        return tuple(_split(raw))
    if name == "quantile_orders":
        if raw.lower() == "percentiles":
            return percentile_orders()
        return tuple(float(p) for p in _split(raw))
    if name == "thresholds":
        return tuple(float(p) for p in _split(raw))
    if name == "obstacles":
        return tuple(tuple(float(v) for v in p.split(":")) for p in _split(raw))
    if name == "cap_schedule":
        return tuple(tuple(int(v) for v in p.split(":")) for p in _split(raw))
    return raw


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value == percentile_orders():
            return "percentiles"
        return ", ".join(":".join(repr(v) for v in x) if isinstance(x, tuple) else _scalar(x) for x in value)
    return _scalar(value)


def _scalar(v: Any) -> str:
    return repr(v) if isinstance(v, float) else str(v)
