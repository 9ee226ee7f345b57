"""Discrete-event simulation of guest activities and the page accesses they cause.

Every activity instance expands its template into a sorted access trace. The
run loop merges all traces in global time order, with ties broken by
(time, activity id, trace index), and hands the merged stream to a tracker
hook in one batch. Times are float milliseconds.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Protocol

import numba
import numpy as np

from sevtrace.config import (ACCESS_EXECUTE, ACCESS_READ, ACCESS_WRITE, FRESH_POOL,
                             ActivityTemplate, ConfigError, PoolConfig, SecretConfig,
                             SimConfig, WorkloadConfig)
from sevtrace.keygen import RsaKey, generate_rsa_key
from sevtrace.mem_model import (PAGE_SIZE, AesKey, GuestMemory, KeyContext, Placement,
                                RsaFactor, SecretSpec, place_secret)

WEB_KINDS = ("TlsHandshakeNginx", "TlsHandshakeApache")
SSH_KIND = "SshHandshake"
DISK_KIND = "DiskWrite"

_FRESH_DEFAULT = PoolConfig(pages=0, exec_fraction=0.22, write_fraction=0.5)


@dataclass(frozen=True)
class Arrival:
    time: float
    kind: str
    activity_id: int
    seed: int
    resource: int | None = None


@dataclass(frozen=True)
class ObservableEvent:
    time: float
    tag: str
    activity_id: int
    kind: str


class AccessHook(Protocol):
    def on_accesses(self, times: np.ndarray, pages: np.ndarray, types: np.ndarray) -> int: ...


# -- workload ----------------------------------------------------------------

def iter_workload(config: WorkloadConfig, seed: int, start_ms: float = 0.0,
                  first_id: int = 0) -> Iterator[Arrival]:
    """Endless, time-ordered arrival stream beginning at ``start_ms``.

    Requests form a Poisson process at ``load_level`` per second. Each one is a
    web request with probability ``web_probability`` (nginx and Apache equally
    likely) and an SSH login otherwise. Background disk flushes recur every
    ``disk_flush_period_ms`` with uniform jitter and a random phase; a web
    request also triggers a disk write with ``request_log_write_probability``.
    """
    rng = np.random.default_rng(seed)
    mean_gap = 1000.0 / config.load_level
    p_web = float(config.web_probability)
    period, jitter = config.disk_flush_period_ms, config.disk_flush_jitter_ms
    if jitter * 2 >= period:
        raise ConfigError("disk flush jitter must be under half the period")
    next_req = start_ms + rng.exponential(mean_gap)
    k = 0
    phase = start_ms + rng.uniform(0, period)
    next_flush = phase + rng.uniform(-jitter, jitter)
    aid = first_id
    while True:
        seed_a = int(rng.integers(2**63))
        if next_flush <= next_req:
            yield Arrival(next_flush, DISK_KIND, aid, seed_a)
            aid += 1
            k += 1
            next_flush = phase + k * period + rng.uniform(-jitter, jitter)
            continue
        t = next_req
        if rng.random() < p_web:
            kind = WEB_KINDS[int(rng.integers(2))]
            yield Arrival(t, kind, aid, seed_a, int(rng.integers(config.resource_count)))
            aid += 1
            if rng.random() < config.request_log_write_probability:
                yield Arrival(t, DISK_KIND, aid, int(rng.integers(2**63)))
                aid += 1
        else:
            yield Arrival(t, SSH_KIND, aid, seed_a)
            aid += 1
        next_req = t + rng.exponential(mean_gap)


def schedule_workload(config: WorkloadConfig, horizon_ms: float, seed: int,
                      start_ms: float = 0.0) -> list[Arrival]:
    if horizon_ms <= 0:
        raise ValueError("horizon_ms must be positive")
    out = []
    for a in iter_workload(config, seed, start_ms):
        if a.time >= start_ms + horizon_ms:
            break
        if a.time >= start_ms:
            out.append(a)
    return out


def trigger_activity(kind: str, at_ms: float, activity_id: int = -1, seed: int = 0,
                     resource: int | None = None) -> Arrival:
    """An activity injected by the attacker, independent of the workload process."""
    if kind not in (*WEB_KINDS, SSH_KIND, DISK_KIND):
        raise ConfigError(f"unknown activity kind {kind!r}")
    return Arrival(float(at_ms), kind, activity_id, seed, resource)


def periodic_arrivals(kind: str, period_ms: float, count: int, start_ms: float = 0.0,
                      first_id: int = 0) -> list[Arrival]:
    return [Arrival(start_ms + i * period_ms, kind, first_id + i, first_id + i)
            for i in range(count)]


def merge_arrivals(*streams: Iterable[Arrival]) -> list[Arrival]:
    return list(heapq.merge(*streams, key=lambda a: (a.time, a.activity_id)))


# -- world: memory image, page pools, secrets --------------------------------

@dataclass
class Layout:
    pools: dict[str, np.ndarray]      # guest pages, code pages first
    exec_counts: dict[str, int]
    free: np.ndarray                  # zero-filled pages in allocation order
    static_pages: dict[str, int]


@dataclass
class SecretMaterial:
    name: str
    config: SecretConfig
    kind: object                      # RsaFactor | AesKey | KeyContext
    placement: Placement | None = None
    rsa: RsaKey | None = None
    key: bytes | None = None


@dataclass
class World:
    config: SimConfig
    memory: GuestMemory
    layout: Layout
    secrets: dict[str, SecretMaterial]
    baseline: tuple = ()

    def reset(self) -> None:
        self.memory.restore(self.baseline)


def _reserve_pairs(order: np.ndarray, taken: np.ndarray, n: int) -> list[int]:
    out: list[int] = []
    if n == 0:
        return out
    for p in order:
        p = int(p)
        if p + 1 < len(taken) and not taken[p] and not taken[p + 1]:
            taken[p] = taken[p + 1] = True
            out.append(p)
            if len(out) == n:
                return out
    raise ConfigError("not enough memory for static secrets")


def _secret_kind(name: str, sc: SecretConfig, secrets: dict, rng: np.random.Generator,
                 keys: dict | None) -> SecretMaterial:
    if sc.type == "rsa":
        key = (keys or {}).get(name) or generate_rsa_key(sc.modulus_bits, rng)
        kind = RsaFactor(key.modulus, key.p, key.factor_bits, sc.endianness)
        return SecretMaterial(name, sc, kind, rsa=key)
    if sc.type == "aes":
        key = (keys or {}).get(name) or rng.bytes(sc.variant // 8)
        return SecretMaterial(name, sc, AesKey(sc.variant, key), key=key)
    inner = secrets[sc.key_of]
    if inner.key is None:
        raise ConfigError(f"secret {name}: key_of must name an aes secret")
    return SecretMaterial(name, sc, KeyContext(inner.key), key=inner.key)


def build_world(config: SimConfig, keys: dict | None = None) -> World:
    """Lay out pools and static secrets, deterministically from ``content_seed``.

    ``keys`` may supply pre-generated key material by secret name.
    """
    rng = np.random.default_rng(config.content_seed)
    n = config.num_pages
    order = rng.permutation(n)
    taken = np.zeros(n, dtype=bool)
    pools, exec_counts, pos = {}, {}, 0
    for name, pc in config.pools.items():
        pages = order[pos:pos + pc.pages]
        if len(pages) < pc.pages:
            raise ConfigError("pools exceed guest memory")
        pos += pc.pages
        taken[pages] = True
        pools[name] = pages.astype(np.int64)
        exec_counts[name] = int(round(pc.exec_fraction * pc.pages))

    secrets: dict[str, SecretMaterial] = {}
    # aes secrets first so key-context records can wrap their keys
    for name in sorted(config.secrets, key=lambda k: config.secrets[k].type == "key-context"):
        secrets[name] = _secret_kind(name, config.secrets[name], secrets, rng, keys)
    static = [s for s in config.secrets if config.secrets[s].placement == "static"]
    static_pages = dict(zip(static, _reserve_pairs(order[pos:], taken, len(static))))

    free = order[~taken[order]].astype(np.int64)
    zero = np.zeros(n, dtype=bool)
    zero[free] = True
    memory = GuestMemory(n, seed=config.content_seed, zero_mask=zero)
    for name, page in static_pages.items():
        m = secrets[name]
        length = len(m.kind.encode())
        offset = int(rng.integers(0, (PAGE_SIZE - length) // 8 + 1)) * 8
        m.placement = place_secret(memory, SecretSpec(m.kind, page, offset))
    layout = Layout(pools, exec_counts, free, static_pages)
    world = World(config, memory, layout, secrets)
    world.baseline = memory.checkpoint()
    return world


# -- activity instances ------------------------------------------------------

@dataclass
class Instance:
    """One activity instance. Trace arrays are kept only for ``instantiate``."""
    arrival: Arrival
    template: ActivityTemplate
    use_times: list[float]
    secret_pages: dict[str, frozenset[int]]
    placements: dict[str, Placement] = field(default_factory=dict)
    times: np.ndarray | None = None
    pages: np.ndarray | None = None
    types: np.ndarray | None = None

    @property
    def event(self) -> ObservableEvent:
        a = self.arrival
        return ObservableEvent(a.time + self.template.end_event_offset, self.template.end_event,
                               a.activity_id, a.kind)

    @property
    def last_use(self) -> float:
        return max(self.use_times)


def time_order(times: np.ndarray, activity: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Argsort by (time, activity id, trace index).

    A plain sort on time, with the rare exact ties re-sorted on the full key.
    """
    order = np.argsort(times)
    st = times[order]
    tie = np.flatnonzero(st[1:] == st[:-1])
    if len(tie):
        mask = np.zeros(len(order), dtype=bool)
        mask[tie] = mask[tie + 1] = True
        sub = order[mask]
        order[mask] = sub[np.lexsort((index[sub], activity[sub], times[sub]))]
    return order


@numba.njit(cache=True)
def _first_touch_index(times, activity, index, pages, num_pages):
    best = np.full(num_pages, -1, dtype=np.int64)
    for i in range(pages.shape[0]):
        p = pages[i]
        b = best[p]
        if b < 0 or times[i] < times[b] or (times[i] == times[b] and (
                activity[i] < activity[b] or (activity[i] == activity[b] and index[i] < index[b]))):
            best[p] = i
    out = np.empty(pages.shape[0], dtype=np.int64)
    n = 0
    for i in range(pages.shape[0]):
        if best[pages[i]] == i:
            out[n] = i
            n += 1
    return out[:n]


def first_touches(times, activity, index, pages, num_pages: int) -> np.ndarray:
    """Indices of each page's first access, in (time, activity id, trace index) order."""
    idx = _first_touch_index(times, activity, index, pages, num_pages)
    return idx[time_order(times[idx], activity[idx], index[idx])]


class Simulator:
    """Expands arrivals into traces against one world.

    ``fresh_start`` picks where in the free list this run begins allocating,
    so separate runs touch different never-used pages.
    """

    def __init__(self, world: World, fresh_start: int = 0):
        self.world = world
        self.memory = world.memory
        self.config = world.config
        self._fresh_pos = fresh_start
        self.instances: dict[int, Instance] = {}

    def fresh_pages(self, n: int) -> np.ndarray:
        free = self.world.layout.free
        if not len(free):
            raise ConfigError("no free memory for fresh pages")
        idx = (self._fresh_pos + np.arange(n)) % len(free)
        self._fresh_pos += n
        return free[idx]

    def _pool_accesses(self, rng, pool: str, shape):
        n = int(np.prod(shape))
        if pool == FRESH_POOL:
            pc = self.config.pools.get(FRESH_POOL, _FRESH_DEFAULT)
            pages = self.fresh_pages(n).reshape(shape)
            is_exec = rng.random(shape) < pc.exec_fraction
        else:
            pc = self.config.pools[pool]
            idx = rng.integers(0, pc.pages, shape)
            pages = self.world.layout.pools[pool][idx]
            is_exec = idx < self.world.layout.exec_counts[pool]
        types = np.where(is_exec, ACCESS_EXECUTE,
                         np.where(rng.random(shape) < pc.write_fraction, ACCESS_WRITE, ACCESS_READ))
        return pages, types

    def _secret_pages(self, name: str, arrival: Arrival, tpl: ActivityTemplate, rng,
                      placements: dict) -> frozenset[int]:
        m = self.world.secrets[name]
        if m.config.placement == "static":
            return m.placement.pages
        if name not in placements:
            material = m.kind.encode()
            page = int(self.fresh_pages(1)[0])
            offset = int(rng.integers(0, (PAGE_SIZE - len(material)) // 8 + 1)) * 8
            lifetime = tpl.session_duration
            if lifetime is None and arrival.kind == SSH_KIND:
                lifetime = self.config.workload.ssh_session_ms
            purge = arrival.time + lifetime if lifetime is not None else None
            placements[name] = place_secret(self.memory, SecretSpec(m.kind, page, offset, purge))
        return placements[name].pages

    def _expand(self, group: list[Arrival], tpl: ActivityTemplate):
        """Traces for same-kind arrivals as (k, columns) arrays; column = trace index."""
        rng = np.random.default_rng([a.seed & (2**63 - 1) for a in group])
        k = len(group)
        base = np.array([a.time for a in group])[:, None]
        t_parts, p_parts, c_parts = [], [], []
        for seg in tpl.segments:
            if seg.count == 0:
                continue
            pages, types = self._pool_accesses(rng, seg.pool, (k, seg.count))
            t_parts.append(base + rng.uniform(seg.start, seg.end, (k, seg.count)))
            p_parts.append(pages)
            c_parts.append(types)
        infos = []
        use_cols: list[list] = [[] for _ in tpl.uses]
        for a in group:
            placements: dict[str, Placement] = {}
            secret_pages, use_times = {}, []
            for j, use in enumerate(tpl.uses):
                pages = self._secret_pages(use.secret, a, tpl, rng, placements)
                secret_pages[use.secret] = pages
                kind = ACCESS_WRITE if rng.random() < use.write_probability else ACCESS_READ
                use_cols[j].append((sorted(pages), kind))
                use_times.append(a.time + use.offset)
            infos.append(Instance(a, tpl, use_times, secret_pages, placements))
        for j, use in enumerate(tpl.uses):
            width = max(len(p) for p, _ in use_cols[j])
            if any(len(p) != width for p, _ in use_cols[j]):
                raise ConfigError(f"{tpl.kind}: secret {use.secret} spans differ between instances")
            t_parts.append(np.broadcast_to(base + use.offset, (k, width)))
            p_parts.append(np.array([p for p, _ in use_cols[j]], dtype=np.int64))
            c_parts.append(np.array([[c] * width for _, c in use_cols[j]]))
        times = np.concatenate(t_parts, axis=1)
        pages = np.concatenate(p_parts, axis=1).astype(np.int64)
        types = np.concatenate(c_parts, axis=1).astype(np.int8)
        for inst in infos:
            self.instances[inst.arrival.activity_id] = inst
        return times, pages, types, infos

    def _template(self, kind: str) -> ActivityTemplate:
        tpl = self.config.templates.get(kind)
        if tpl is None:
            raise ConfigError(f"no template for activity kind {kind!r}")
        return tpl

    def instantiate(self, arrival: Arrival) -> Instance:
        """Expand a single arrival, keeping its time-sorted trace on the instance."""
        times, pages, types, (inst,) = self._expand([arrival], self._template(arrival.kind))
        order = np.argsort(times[0], kind="stable")
        inst.times, inst.pages, inst.types = times[0][order], pages[0][order], types[0][order]
        return inst

    def run(self, arrivals: Iterable[Arrival], hook: AccessHook | None = None,
            until_ms: float = math.inf, start_ms: float = -math.inf,
            first_touch_only: bool = False) -> list[ObservableEvent]:
        """Simulate ``arrivals`` (sorted by time) and return the event log.

        Accesses in ``[start_ms, until_ms]`` reach ``hook`` in global order.
        With ``first_touch_only`` the hook sees only each page's first access,
        which is all a track-once hook whose pages are all tracked can use.
        Contents only change through secret placement on never-used pages and
        through purges, so purges are applied once the run reaches ``until_ms``.
        """
        groups: dict[str, list[Arrival]] = {}
        prev = -math.inf
        for a in arrivals:
            if a.time < prev:
                raise ValueError("arrivals must be sorted by time")
            prev = a.time
            if a.time > until_ms:
                break
            groups.setdefault(a.kind, []).append(a)
        parts, infos = [], []
        for kind, group in groups.items():
            times, pages, types, inf = self._expand(group, self._template(kind))
            aid = np.broadcast_to(np.array([a.activity_id for a in group])[:, None], times.shape)
            col = np.broadcast_to(np.arange(times.shape[1]), times.shape)
            parts.append((times.ravel(), pages.ravel(), types.ravel(), aid.ravel(), col.ravel()))
            infos.extend(inf)
        events = sorted((i.event for i in infos if i.event.time <= until_ms),
                        key=lambda e: (e.time, e.activity_id))
        if hook is not None and parts:
            times, pages, types, aid, col = (np.concatenate(x) for x in zip(*parts))
            keep = (times >= start_ms) & (times <= until_ms)
            times, pages, types, aid, col = times[keep], pages[keep], types[keep], aid[keep], col[keep]
            if first_touch_only:
                order = first_touches(times, aid, col, pages, self.memory.num_pages)
            else:
                order = time_order(times, aid, col)
            hook.on_accesses(times[order], pages[order], types[order])
        if until_ms < math.inf:
            self.memory.advance_to(until_ms)
        return events


def run(simulator: Simulator, arrivals: Iterable[Arrival], hook: AccessHook | None = None,
        until_ms: float = math.inf, start_ms: float = -math.inf,
        first_touch_only: bool = False) -> list[ObservableEvent]:
    return simulator.run(arrivals, hook, until_ms, start_ms, first_touch_only)
