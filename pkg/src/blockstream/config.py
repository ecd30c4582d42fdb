"""``key=value`` configuration shared by every subcommand.

A config file holds one ``key = value`` per line with ``#`` comments.
Command-line ``--set key=value`` overrides win over file values. Unknown
keys are rejected.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .client import ClientConfig
from .latency import LatencyModel
from .server import ServerConfig


class ConfigError(ValueError):
    pass


def _names(text: str) -> tuple[str, ...]:
    return tuple(n.strip() for n in text.split(",") if n.strip())


def _seconds_to_us(text: str) -> int:
    return int(round(float(text) * 1_000_000))


# key -> (target, attribute, converter)
KEYS: dict[str, tuple[str, str, Callable[[str], object]]] = {
    "server_addr": ("client", "server_addr", str),
    "block_size": ("both", "block_size", int),
    "pool_capacity": ("client", "pool_capacity", int),
    "cache_pages": ("client", "cache_pages", int),
    "workers": ("client", "workers", int),
    "redirect_names": ("client", "redirect_names", _names),
    "ring_capacity": ("client", "ring_capacity", int),
    "seg_max": ("server", "seg_max", int),
    "prefetch_strategy": ("server", "prefetch_strategy", str),
    "variance_threshold": ("server", "variance_threshold", float),
    "variance_estimator": ("server", "variance_estimator", str),
    "prefetch_window": ("server", "prefetch_window", int),
    "match_checkpoints": ("server", "match_checkpoints", str),
    "first_segment_matches": ("server", "first_segment_matches", int),
    "construction_timeout": ("server", "construction_timeout_us", _seconds_to_us),
    "session_idle_timeout": ("server", "session_idle_timeout_us", _seconds_to_us),
    "lat.net_rtt": ("lat", "net_rtt", float),
    "lat.net_per_block": ("lat", "net_per_block", float),
    "lat.disk_read": ("lat", "disk_read", float),
    "lat.mem_read": ("lat", "mem_read", float),
    "lat.loss_rate": ("lat", "loss_rate", float),
    "lat.retransmit_penalty": ("lat", "retransmit_penalty", float),
    "lat.seed": ("lat", "seed", int),
    "lat.loss_sampling": ("lat", "loss_sampling", str),
    "listen_addr": ("cli", "listen_addr", str),
    "image_dir": ("cli", "image_dir", str),
    "action_store": ("cli", "action_store", str),
    "clock": ("cli", "clock", str),
    "log_level": ("cli", "log_level", str),
}


def parse_pairs(lines: Iterable[str], origin: str = "") -> dict[str, str]:
    values = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            where = f"{origin}:{n}: " if origin else ""
            raise ConfigError(f"{where}expected key=value, got {raw.strip()!r}")
        values[key.strip()] = value.strip()
    return values


@dataclass
class CommandConfig:
    """Merged view of a config file and command-line overrides."""

    values: dict[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Iterable[str] = ()) -> "CommandConfig":
        values = {}
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            values.update(parse_pairs(text.splitlines(), str(path)))
        values.update(parse_pairs(overrides, "--set"))
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self):
        unknown = sorted(set(self.values) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for key in self.values:
            self._converted(key)
        try:
            self.client_config()
            self.server_config()
            self.latency_model()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.get("clock", "virtual") not in ("virtual", "wall"):
            raise ConfigError("clock must be 'virtual' or 'wall'")

    def _converted(self, key: str):
        conv = KEYS[key][2]
        try:
            return conv(self.values[key])
        except ValueError:
            raise ConfigError(f"bad value for {key}: {self.values[key]!r}") from None

    def get(self, key: str, default=None):
        if key not in KEYS:
            raise KeyError(key)
        return self._converted(key) if key in self.values else default

    def set_default(self, key: str, value):
        if value is not None and key not in self.values:
            self.values[key] = str(value)

    def _section(self, target: str) -> dict:
        out = {}
        for key in self.values:
            where, attr, _ = KEYS[key]
            if where == target or (where == "both" and target in ("client", "server")):
                out[attr] = self._converted(key)
        return out

    def client_config(self) -> ClientConfig:
        return ClientConfig(**self._section("client"))

    def server_config(self) -> ServerConfig:
        return ServerConfig(**self._section("server"))

    def latency_model(self) -> LatencyModel:
        return LatencyModel(**self._section("lat"))


class StructuredFormatter(logging.Formatter):
    """``ts level component message kv...`` on one line."""

    converter = time.gmtime

    def format(self, record: logging.LogRecord) -> str:
        ts = self.formatTime(record, "%Y-%m-%dT%H:%M:%S") + f".{int(record.msecs):03d}Z"
        component = record.name.rsplit(".", 1)[-1]
        line = f"{ts} {record.levelname.lower()} {component} {record.getMessage()}"
        if record.exc_info:
            line += " exc=" + repr(self.formatException(record.exc_info).splitlines()[-1])
        return line


def setup_logging(level: str = "info", stream=None):
    handler = logging.StreamHandler(stream)
    handler.setFormatter(StructuredFormatter())
    root = logging.getLogger("blockstream")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False
