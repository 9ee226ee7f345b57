"""Experiment configuration: dataclasses plus a YAML loader.

The schema is documented in ``docs/config.md``; ``data/defaults.yaml`` holds
the calibrated defaults.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

ACCESS_READ, ACCESS_WRITE, ACCESS_EXECUTE = 0, 1, 2
ACCESS_NAMES = {"read": ACCESS_READ, "write": ACCESS_WRITE, "execute": ACCESS_EXECUTE}
ACCESS_LETTERS = "rwx"

ACTIVITY_KINDS = ("TlsHandshakeNginx", "TlsHandshakeApache", "SshHandshake", "DiskWrite")
EVENT_TAGS = ("ChangeCipherSpec", "SshNewKeys", "DiskImageWrite")

FRESH_POOL = "fresh"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PoolConfig:
    pages: int
    exec_fraction: float = 0.22
    write_fraction: float = 0.25


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    pool: str
    count: int


@dataclass(frozen=True)
class Use:
    offset: float
    secret: str
    write_probability: float = 0.0


@dataclass(frozen=True)
class ActivityTemplate:
    kind: str
    end_event: str
    end_event_offset: float
    uses: tuple[Use, ...]
    segments: tuple[Segment, ...] = ()
    session_duration: float | None = None

    def __post_init__(self):
        if self.kind not in ACTIVITY_KINDS:
            raise ConfigError(f"unknown activity kind {self.kind!r}")
        if self.end_event not in EVENT_TAGS:
            raise ConfigError(f"unknown event tag {self.end_event!r}")
        if not self.uses:
            raise ConfigError(f"{self.kind}: an activity must use its secret at least once")
        if max(u.offset for u in self.uses) >= self.end_event_offset:
            raise ConfigError(f"{self.kind}: last use must precede the end event")
        if any(s.start < 0 or s.end < s.start or s.count < 0 for s in self.segments):
            raise ConfigError(f"{self.kind}: bad segment bounds")
        if min(u.offset for u in self.uses) < 0:
            raise ConfigError(f"{self.kind}: negative use offset")

    @property
    def last_use_offset(self) -> float:
        return max(u.offset for u in self.uses)

    @property
    def critical_window(self) -> float:
        return self.end_event_offset - self.last_use_offset

    @property
    def duration(self) -> float:
        ends = [s.end for s in self.segments] + [self.end_event_offset]
        return max(ends)


@dataclass(frozen=True)
class SecretConfig:
    type: str                       # rsa | aes | key-context
    placement: str = "static"       # static | per-instance
    modulus_bits: int = 4096
    variant: int = 256
    key_of: str | None = None       # key-context records wrap another secret's key
    endianness: str = "little"


@dataclass(frozen=True)
class Distribution:
    """Latency/delay distribution, in ms.

    kinds: ``constant`` (value), ``triangular`` (median, spread: symmetric
    triangle on [median - spread, median + spread]), ``lognormal`` (median,
    sigma; both may grow linearly with the load level via ``*_per_load``).
    """
    kind: str = "constant"
    value: float = 0.0
    median: float = 0.0
    spread: float = 0.0
    sigma: float = 0.0
    median_per_load: float = 0.0
    sigma_per_load: float = 0.0
    minimum: float = 0.0

    def sample(self, rng: np.random.Generator, load_level: float = 0.0, size=None):
        if self.kind == "constant":
            return np.full(size, self.value) if size is not None else float(self.value)
        if self.kind == "triangular":
            lo, hi = self.median - self.spread, self.median + self.spread
            if hi <= lo:
                return np.full(size, self.median) if size is not None else float(self.median)
            x = rng.triangular(lo, self.median, hi, size)
        elif self.kind == "lognormal":
            med = self.median + self.median_per_load * load_level
            sig = self.sigma + self.sigma_per_load * load_level
            x = med * np.exp(sig * rng.standard_normal(size))
        else:
            raise ConfigError(f"unknown distribution kind {self.kind!r}")
        x = np.maximum(x, self.minimum)
        return x if size is not None else float(x)

    def median_at(self, load_level: float = 0.0) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "lognormal":
            return self.median + self.median_per_load * load_level
        return self.median


@dataclass(frozen=True)
class WorkloadConfig:
    load_level: float = 1.0
    web_probability: Fraction = Fraction(300, 301)
    ssh_probability: Fraction = Fraction(1, 301)
    resource_count: int = 11
    ssh_session_ms: float = 120_000.0
    disk_flush_period_ms: float = 4500.0
    disk_flush_jitter_ms: float = 500.0
    request_log_write_probability: float = 0.0

    def __post_init__(self):
        if self.load_level <= 0:
            raise ConfigError("load_level must be positive")
        if self.web_probability + self.ssh_probability != 1:
            raise ConfigError("web and ssh probabilities must sum to 1")

    def with_load(self, load_level: float) -> "WorkloadConfig":
        d = dict(self.__dict__)
        d["load_level"] = load_level
        return WorkloadConfig(**d)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    activity: str
    secret: str
    analysis_ms: float


@dataclass(frozen=True)
class SearchSettings:
    filter_execute: bool = True
    filter_writes: bool = False
    prioritize_reads: bool = False
    early_cutoff_ms: float | None = 30.0
    restart_on_cutoff: bool = False
    extract_latency: Distribution = field(
        default_factory=lambda: Distribution("triangular", median=123.0, spread=30.0))


@dataclass
class SimConfig:
    num_pages: int
    content_seed: int
    pools: dict[str, PoolConfig]
    secrets: dict[str, SecretConfig]
    templates: dict[str, ActivityTemplate]
    workload: WorkloadConfig
    detection_delay: dict[str, Distribution]
    scenarios: dict[str, ScenarioConfig]
    search: SearchSettings
    horizon_ms: float = 60_000.0

    def delay_for(self, kind: str, tag: str) -> Distribution:
        if kind in self.detection_delay:
            return self.detection_delay[kind]
        if tag in self.detection_delay:
            return self.detection_delay[tag]
        raise ConfigError(f"no detection delay configured for {kind}/{tag}")

    def replace(self, **changes) -> "SimConfig":
        new = copy.copy(self)
        for k, v in changes.items():
            if not hasattr(new, k):
                raise ConfigError(f"unknown config field {k!r}")
            setattr(new, k, v)
        return new


def _fraction(v) -> Fraction:
    if isinstance(v, str):
        return Fraction(v.replace(" ", ""))
    return Fraction(v).limit_denominator(10**6)


def _dist(d: dict) -> Distribution:
    return Distribution(**d)


def _template(kind: str, d: dict) -> ActivityTemplate:
    uses = tuple(Use(**u) for u in d.get("uses", ()))
    segments = tuple(Segment(**s) for s in d.get("segments", ()))
    return ActivityTemplate(kind=kind, end_event=d["end_event"],
                            end_event_offset=float(d["end_event_offset"]), uses=uses,
                            segments=segments, session_duration=d.get("session_duration"))


def from_dict(raw: dict) -> SimConfig:
    try:
        mem = raw["memory"]
        pools = {k: PoolConfig(**v) for k, v in raw["pools"].items()}
        secrets = {k: SecretConfig(**v) for k, v in raw["secrets"].items()}
        templates = {k: _template(k, v) for k, v in raw["templates"].items()}
        wl = dict(raw.get("workload", {}))
        for key in ("web_probability", "ssh_probability"):
            if key in wl:
                wl[key] = _fraction(wl[key])
        workload = WorkloadConfig(**wl)
        delays = {k: _dist(v) for k, v in raw["detection_delay"].items()}
        scenarios = {k: ScenarioConfig(name=k, **v) for k, v in raw["scenarios"].items()}
        s = dict(raw.get("search", {}))
        if "extract_latency" in s:
            s["extract_latency"] = _dist(s["extract_latency"])
        search = SearchSettings(**s)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    cfg = SimConfig(num_pages=int(mem["num_pages"]), content_seed=int(mem["content_seed"]),
                    pools=pools, secrets=secrets, templates=templates, workload=workload,
                    detection_delay=delays, scenarios=scenarios, search=search,
                    horizon_ms=float(raw.get("horizon_ms", 60_000.0)))
    _validate(cfg)
    return cfg


def _validate(cfg: SimConfig) -> None:
    for t in cfg.templates.values():
        for s in t.segments:
            if s.pool != FRESH_POOL and s.pool not in cfg.pools:
                raise ConfigError(f"{t.kind}: unknown pool {s.pool!r}")
        for u in t.uses:
            if u.secret not in cfg.secrets:
                raise ConfigError(f"{t.kind}: unknown secret {u.secret!r}")
    for sc in cfg.scenarios.values():
        if sc.activity not in cfg.templates:
            raise ConfigError(f"scenario {sc.name}: unknown activity {sc.activity!r}")
        if sc.secret not in cfg.secrets:
            raise ConfigError(f"scenario {sc.name}: unknown secret {sc.secret!r}")
    for name, sec in cfg.secrets.items():
        if sec.type not in ("rsa", "aes", "key-context"):
            raise ConfigError(f"secret {name}: unknown type {sec.type!r}")
        if sec.type == "key-context" and sec.key_of not in cfg.secrets:
            raise ConfigError(f"secret {name}: key_of must name another secret")


def load_config(path: str | Path | None = None) -> SimConfig:
    if path is None:
        text = resources.files("sevtrace").joinpath("data/defaults.yaml").read_text()
    else:
        text = Path(path).read_text()
    return from_dict(yaml.safe_load(text))


def default_config() -> SimConfig:
    return load_config(None)
