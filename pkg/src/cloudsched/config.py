"""General and cloud configuration files (INI).

General file::

    [global]
    poll_interval = 30s
    schedule_interval = 30s
    cleanup_interval = 30s
    rebalance_mode = graceful        ; or kill
    error_threshold = 1
    boot_timeout = 15m               ; "none" disables
    drain_timeout = none
    persist_on_shutdown = false
    persistence_file = /var/lib/cloudsched/state.json
    socket = /tmp/cloudsched.sock
    log_level = INFO

Cloud file: one section per cluster, in placement order::

    [uvic]
    host = uvic.cloud
    cloud_type = simulated           ; nimbus and ec2 need simulate = true
    memory = 4096                    ; MB per VM
    cpu_archs = x86, x86_64
    networks = private, public
    vm_slots = 40
    cpu_cores = 2
    storage = 100                    ; GB per VM
    boot_latency = 120s              ; or "60s-180s"
    fault_rate = 0
    boot_failure_rate = 0
    rng_seed = 0
"""
from __future__ import annotations

import configparser
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .backends import CloudBackend, SimCloudConfig, SimulatedCloud
from .model import Clock, CloudType, Cluster, parse_duration
from .scheduler import RebalanceMode, SchedulerConfig

logger = logging.getLogger(__name__)

DEFAULT_SOCKET = "/tmp/cloudsched.sock"


class ConfigError(Exception):
    def __init__(self, path: str, message: str, line: Optional[int] = None,
                 field: Optional[str] = None):
        where = path if line is None else f"{path}:{line}"
        text = f"{where}: {field}: {message}" if field else f"{where}: {message}"
        super().__init__(text)
        self.path = path
        self.line = line
        self.field = field


@dataclass
class GeneralConfig:
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    socket: str = DEFAULT_SOCKET
    log_level: str = "INFO"


@dataclass
class CloudEntry:
    cluster: Cluster
    sim: SimCloudConfig
    simulate: bool = True


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:\s;#\[][^=:]*?)\s*[=:]")


class _Source:
    """Parsed INI text plus the line each key came from."""

    def __init__(self, path: str):
        self.path = path
        try:
            with open(path) as fh:
                text = fh.read()
        except FileNotFoundError:
            raise ConfigError(path, "file not found") from None
        except OSError as exc:
            raise ConfigError(path, f"cannot read: {exc.strerror}") from None
        self.parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"),
                                                interpolation=None, strict=True)
        try:
            self.parser.read_string(text, source=path)
        except configparser.MissingSectionHeaderError as exc:
            raise ConfigError(path, "key outside of any [section]", exc.lineno) from None
        except configparser.DuplicateSectionError as exc:
            raise ConfigError(path, f"duplicate section [{exc.section}]", exc.lineno) from None
        except configparser.DuplicateOptionError as exc:
            raise ConfigError(path, "duplicate key", exc.lineno, exc.option) from None
        except configparser.ParsingError as exc:
            lineno = exc.errors[0][0] if exc.errors else None
            raise ConfigError(path, "not a 'key = value' line", lineno) from None
        self.lines: Dict[Tuple[str, str], int] = {}
        self.section_lines: Dict[str, int] = {}
        section = None
        for n, raw in enumerate(text.splitlines(), start=1):
            m = _SECTION_RE.match(raw)
            if m:
                section = m.group(1).strip()
                self.section_lines[section] = n
                continue
            m = _KEY_RE.match(raw)
            if m and section is not None and not raw[:1].isspace():
                self.lines[(section, m.group(1).strip().lower())] = n

    def error(self, section: str, key: Optional[str], message: str) -> ConfigError:
        line = self.lines.get((section, key)) if key else self.section_lines.get(section)
        return ConfigError(self.path, message, line, key)

    def check_keys(self, section: str, allowed) -> None:
        for key in self.parser[section]:
            if key not in allowed:
                raise self.error(section, key, "unknown key")

    def get(self, section: str, key: str, convert: Callable, default=None, required=False):
        sec = self.parser[section]
        if key not in sec:
            if required:
                raise self.error(section, None, f"missing required key {key!r}")
            return default
        raw = sec[key].strip()
        try:
            return convert(raw)
        except (ValueError, TypeError) as exc:
            raise self.error(section, key, str(exc) or f"bad value {raw!r}") from None


def _int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{raw!r} is not an integer") from None


def _nonneg(raw: str) -> int:
    v = _int(raw)
    if v < 0:
        raise ValueError(f"must be >= 0, got {v}")
    return v


def _optional_duration(raw: str) -> Optional[int]:
    if raw.lower() in ("none", "infinite", "off", ""):
        return None
    return parse_duration(raw)


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "yes", "true", "on"):
        return True
    if low in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"{raw!r} is not a boolean")


def _list(raw: str) -> List[str]:
    return [p.strip() for p in raw.split(",") if p.strip()]


def _latency(raw: str):
    if "-" in raw:
        lo, _, hi = raw.partition("-")
        return (parse_duration(lo), parse_duration(hi))
    return parse_duration(raw)


_GENERAL_KEYS = {
    "poll_interval", "schedule_interval", "cleanup_interval", "rebalance_mode",
    "error_threshold", "boot_timeout", "drain_timeout", "persist_on_shutdown",
    "persistence_file", "socket", "log_level",
}


def load_general(path: str) -> GeneralConfig:
    src = _Source(path)
    if "global" not in src.parser:
        raise ConfigError(path, "missing [global] section")
    s = "global"
    src.check_keys(s, _GENERAL_KEYS)
    base = SchedulerConfig()
    kwargs = dict(
        poll_interval=src.get(s, "poll_interval", parse_duration, base.poll_interval),
        schedule_interval=src.get(s, "schedule_interval", parse_duration, base.schedule_interval),
        cleanup_interval=src.get(s, "cleanup_interval", parse_duration, base.cleanup_interval),
        rebalance_mode=src.get(s, "rebalance_mode", RebalanceMode, base.rebalance_mode),
        error_threshold=src.get(s, "error_threshold", _int, base.error_threshold),
        boot_timeout=src.get(s, "boot_timeout", _optional_duration, base.boot_timeout),
        drain_timeout=src.get(s, "drain_timeout", _optional_duration, base.drain_timeout),
        persist_on_shutdown=src.get(s, "persist_on_shutdown", _bool, base.persist_on_shutdown),
        persistence_path=src.get(s, "persistence_file", str, base.persistence_path),
    )
    for key in ("poll_interval", "schedule_interval", "cleanup_interval"):
        if kwargs[key] <= 0:
            raise src.error(s, key, "must be > 0")
    if kwargs["error_threshold"] < 1:
        raise src.error(s, "error_threshold", "must be >= 1")
    if kwargs["persist_on_shutdown"] and not kwargs["persistence_path"]:
        raise src.error(s, "persist_on_shutdown", "needs persistence_file")
    level = src.get(s, "log_level", str, "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise src.error(s, "log_level", f"unknown level {level!r}")
    return GeneralConfig(
        scheduler=SchedulerConfig(**kwargs),
        socket=src.get(s, "socket", str, DEFAULT_SOCKET),
        log_level=level,
    )


_CLOUD_KEYS = {
    "host", "cloud_type", "memory", "cpu_archs", "networks", "vm_slots", "cpu_cores",
    "storage", "simulate", "boot_latency", "fault_rate", "boot_failure_rate", "rng_seed",
}


def _probability(raw: str) -> float:
    try:
        p = float(raw)
    except ValueError:
        raise ValueError(f"{raw!r} is not a number") from None
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"must be within [0, 1], got {p}")
    return p


def load_clouds(path: str) -> List[CloudEntry]:
    src = _Source(path)
    entries = []
    for name in src.parser.sections():
        src.check_keys(name, _CLOUD_KEYS)
        ctype = src.get(name, "cloud_type", CloudType, CloudType.SIMULATED)
        simulate = src.get(name, "simulate", _bool, ctype is CloudType.SIMULATED)
        if not simulate:
            raise src.error(name, "simulate",
                            f"no {ctype.value} client is available; set simulate = true")
        archs = src.get(name, "cpu_archs", _list, ["x86", "x86_64"])
        nets = src.get(name, "networks", _list, ["private", "public"])
        for key, values, allowed in (("cpu_archs", archs, ("x86", "x86_64")),
                                     ("networks", nets, ("private", "public"))):
            bad = [v for v in values if v not in allowed]
            if bad:
                raise src.error(name, key, f"unknown value {bad[0]!r}")
        cluster = Cluster(
            name=name,
            host=src.get(name, "host", str, required=True),
            cloud_type=ctype,
            memory=src.get(name, "memory", _nonneg, required=True),
            cpu_archs=frozenset(archs),
            networks=frozenset(nets),
            vm_slots=src.get(name, "vm_slots", _nonneg, required=True),
            cpu_cores=src.get(name, "cpu_cores", _nonneg, required=True),
            storage=src.get(name, "storage", _nonneg, 0),
        )
        sim = SimCloudConfig(
            boot_latency=src.get(name, "boot_latency", _latency, 0),
            fault_rate=src.get(name, "fault_rate", _probability, 0.0),
            boot_failure_rate=src.get(name, "boot_failure_rate", _probability, 0.0),
            rng_seed=src.get(name, "rng_seed", _int, 0),
        )
        entries.append(CloudEntry(cluster, sim, simulate))
    if not entries:
        raise ConfigError(path, "no clusters defined")
    return entries


def make_backend(entry: CloudEntry, clock: Clock,
                 on_advertise: Optional[Callable] = None) -> CloudBackend:
    """Backend for one configured cluster.

    Every cloud type is served by the simulated cloud; the image locator
    rules of its type still apply during matching.
    """
    if not entry.simulate:
        raise ValueError(f"{entry.cluster.name}: no client for {entry.cluster.cloud_type.value}")
    return SimulatedCloud(entry.cluster.name, entry.sim, clock, on_advertise)

