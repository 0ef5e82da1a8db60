"""Configuration dataclasses for the service and the agents.

Config files are YAML or JSON mappings whose keys are the field names
below; unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Any

import yaml

from .broker import DEFAULT_RETRY_MS, DEFAULT_WORKERS


class ConfigError(ValueError):
    pass


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    token: str | None = None            # shared secret for mutating endpoints
    worker_count: int = DEFAULT_WORKERS
    retry_hint_ms: int = DEFAULT_RETRY_MS
    optimizer_interval_ms: int = 60_000  # 0 disables the background optimizer thread
    journal_dir: str | None = None      # append job/transfer journals here
    storage_elements: list[dict] = field(default_factory=list)   # name, capacity, mss, bandwidth
    files: list[dict] = field(default_factory=list)              # lfn, size, se, mirrors
    tag_sites: bool = True
    bulk_threshold: int | None = None
    auto_replicate: bool = False

    def validate(self):
        if self.worker_count < 1:
            raise ConfigError("worker_count must be at least 1")
        if self.retry_hint_ms < 0 or self.optimizer_interval_ms < 0:
            raise ConfigError("intervals must be non-negative")
        if not 0 <= self.port < 65536:
            raise ConfigError("port out of range")
        return self


@dataclass
class CEAgentConfig:
    name: str
    site: str
    server: str = "http://127.0.0.1:8080"
    token: str | None = None
    close_se: list[str] = field(default_factory=list)
    packages: list[str] = field(default_factory=list)
    partitions: list[str] = field(default_factory=list)
    slots: int = 1
    requirements: str | None = None
    poll_interval_ms: int = 30_000
    run_commands: bool = False          # actually execute Executable via subprocess
    default_duration_ms: int = 1000     # simulated run time when not executing
    max_idle_polls: int | None = None   # exit after this many consecutive NoMatch replies


@dataclass
class FTDAgentConfig:
    name: str
    site: str
    close_se: str
    server: str = "http://127.0.0.1:8080"
    token: str | None = None
    cache: int = 10**9
    poll_interval_ms: int = 30_000
    time_scale: float = 0.0             # wall seconds per simulated ms of copy time
    max_idle_polls: int | None = None


def _from_mapping(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError("%s: expected a mapping" % where)
    names = {f.name for f in fields(cls)}
    extra = sorted(set(raw) - names)
    if extra:
        raise ConfigError("%s: unknown keys %s" % (where, extra))
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError("%s: %s" % (where, exc)) from None


def read_mapping(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("%s: %s" % (path, exc.strerror)) from None
    try:
        return json.loads(text)
    except ValueError:
        pass
    try:
        return yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("%s: %s" % (path, exc)) from None


def load_service_config(path: str | None, **overrides) -> ServiceConfig:
    raw = read_mapping(path) if path else {}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return _from_mapping(ServiceConfig, raw, path or "config").validate()


def load_agent_config(path: str, kind: str):
    cls = {"ce": CEAgentConfig, "ftd": FTDAgentConfig}[kind]
    return _from_mapping(cls, read_mapping(path), path)
