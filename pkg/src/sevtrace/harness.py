"""Experiment runner: randomized attack iterations and their statistics.

One ``Experiment`` holds a fixed guest image (layout, planted static secrets,
key material) for a configuration. Every iteration restores that image, draws
a tracking start uniformly over the horizon, simulates the workload around it,
stops at the scenario's observable event, and runs the search.

Iteration seeds come from the master seed by ``iteration_seed``: a
``numpy.random.SeedSequence`` with entropy ``master`` and spawn key
``(scenario index, load level in thousandths, iteration)``. Seeds therefore do
not depend on how iterations are split across processes.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from sevtrace.analyzers import encrypt_block
from sevtrace.config import SimConfig
from sevtrace.searcher import (FOUND, CachedAnalyzer, FdeKeyAnalyzer, RsaFactorAnalyzer,
                               SearchConfig, SearchResult, preprocess, search)
from sevtrace.simulator import (Arrival, ObservableEvent, Simulator, World, build_world,
                                iter_workload)
from sevtrace.tracker import tracking_start, tracking_stop

SCENARIOS = ("tls-nginx", "tls-apache", "fde", "ssh")
LOAD_LEVELS = (1, 9, 17, 25)
RESULT_COLUMNS = ("scenario", "load_level", "iteration", "seed", "success", "reaction_ms",
                  "tracked_pages", "filtered_pages", "extracted_pages", "observation_s",
                  "search_s", "requests")
HIST_COLUMNS = ("bin_ms", "count", "normalized")

# an observation that sees no stop event for this long is abandoned
MAX_OBSERVATION_MS = 3_600_000.0


@dataclass
class AttackReport:
    scenario: str
    load_level: float
    iteration: int
    seed: int
    success: bool
    reaction_ms: float
    tracked_pages: int
    filtered_pages: int
    extracted_pages: int
    observation_ms: float
    search_ms: float
    requests_made: int
    outcome: str = FOUND
    tracking_start_ms: float = 0.0
    stop_ms: float = 0.0

    def row(self) -> list:
        return [self.scenario, _num(self.load_level), self.iteration, self.seed,
                int(self.success), f"{self.reaction_ms:.3f}", self.tracked_pages,
                self.filtered_pages, self.extracted_pages, f"{self.observation_ms / 1000:.6f}",
                f"{self.search_ms / 1000:.6f}", self.requests_made]


def _num(x: float):
    return int(x) if float(x).is_integer() else x


def iteration_seed(master: int, scenario: str, load_level: float, iteration: int) -> int:
    sidx = SCENARIOS.index(scenario) if scenario in SCENARIOS else len(SCENARIOS)
    ss = np.random.SeedSequence(master, spawn_key=(sidx, int(round(load_level * 1000)), iteration))
    hi, lo = ss.generate_state(2, np.uint32)
    return (int(hi) << 32 | int(lo)) & (2**63 - 1)


ArrivalSource = Callable[..., Iterable[Arrival]]


def poisson_source(config: SimConfig, load_level: float, seed: int,
                   start_ms: float) -> Iterator[Arrival]:
    return iter_workload(config.workload.with_load(load_level), seed, start_ms)


class Experiment:
    """A scenario bound to a fixed guest image and a persistent analysis cache."""

    def __init__(self, config: SimConfig, scenario: str, world: World | None = None,
                 arrival_source: ArrivalSource | None = None, probe_plaintext: bytes | None = None):
        if scenario not in config.scenarios:
            raise ValueError(f"unknown scenario {scenario!r}")
        self.config = config
        self.scenario = config.scenarios[scenario]
        self.name = scenario
        self.world = world if world is not None else build_world(config)
        self.template = config.templates[self.scenario.activity]
        self.delay = config.delay_for(self.template.kind, self.template.end_event)
        self.arrival_source = arrival_source or poisson_source
        self.search_config = SearchConfig.from_settings(config.search, self.scenario.analysis_ms)
        self.lead_ms = max(t.duration for t in config.templates.values()) + 1.0
        secret = self.world.secrets[self.scenario.secret]
        if secret.rsa is not None:
            inner = RsaFactorAnalyzer(secret.rsa.modulus, secret.kind.factor_bits,
                                      secret.config.endianness)
            self.probe = None
        else:
            pt = probe_plaintext or bytes(range(16))
            self.probe = (pt, encrypt_block(secret.key, pt))
            inner = FdeKeyAnalyzer(secret.config.variant if secret.config.type == "aes"
                                   else len(secret.key) * 8, self.probe)
        self.analyzer = CachedAnalyzer(inner)
        # the activity that stopped the most recent iteration, for inspection
        self.last_instance = None

    def run_iteration(self, load_level: float, seed: int, iteration: int = 0,
                      tracking_start_ms: float | None = None,
                      search_config: SearchConfig | None = None) -> AttackReport:
        cfg = search_config or self.search_config
        rng = np.random.default_rng(seed)
        world = self.world
        world.reset()
        t0 = (tracking_start_ms if tracking_start_ms is not None
              else self.lead_ms + rng.uniform(0, self.config.horizon_ms))
        sim = Simulator(world, fresh_start=int(rng.integers(max(1, len(world.layout.free)))))
        source = self.arrival_source(self.config, load_level, int(rng.integers(2**63)),
                                     t0 - self.lead_ms)
        kind, end_off = self.template.kind, self.template.end_event_offset
        arrivals, trigger, stop, delay = [], None, math.inf, 0.0
        for a in source:
            if a.time > stop:
                break
            if trigger is None and a.time > t0 + MAX_OBSERVATION_MS:
                break
            arrivals.append(a)
            if trigger is None and a.kind == kind and a.time + end_off >= t0:
                trigger = a
                delay = float(self.delay.sample(rng, load_level))
                stop = a.time + end_off + delay
        session = tracking_start(world.memory, t0)
        self.last_instance = None
        if trigger is None:
            sim.run(arrivals, session, start_ms=t0, first_touch_only=True)
            tracking_stop(session, event_time=t0)
            return AttackReport(self.name, load_level, iteration, seed, False, math.nan,
                                len(session), 0, 0, 0.0, 0.0, 0, "no-event", t0, t0)
        sim.run(arrivals, session, until_ms=stop, start_ms=t0, first_touch_only=True)
        event = ObservableEvent(trigger.time + end_off, self.template.end_event,
                                trigger.activity_id, kind)
        tracking_stop(session, event, delay)
        records = session.arrays()
        cands = preprocess(records, cfg)
        result = search(cands, world.memory, self.analyzer, cfg, rng, start_ms=stop,
                        observation_ms=stop - t0)
        self.last_instance = sim.instances[trigger.activity_id]
        reaction = stop - self.last_instance.last_use
        return AttackReport(self.name, load_level, iteration, seed, result.found, reaction,
                            len(records), len(cands), result.extracted_pages, stop - t0,
                            result.search_duration_ms, result.requests_made, result.outcome,
                            t0, stop)

    def run(self, load_level: float, iterations: int, master_seed: int,
            progress: Callable[[int], None] | None = None) -> list[AttackReport]:
        out = []
        for i in range(iterations):
            seed = iteration_seed(master_seed, self.name, load_level, i)
            out.append(self.run_iteration(load_level, seed, i))
            if progress is not None:
                progress(i)
        return out


def run_iteration(config: SimConfig, scenario: str, load_level: float, seed: int) -> AttackReport:
    """One-off iteration. Builds a fresh image; use ``Experiment`` for batches."""
    return Experiment(config, scenario).run_iteration(load_level, seed)


# -- statistics --------------------------------------------------------------

@dataclass
class SummaryStats:
    count: int
    success_rate: float
    median_extracted: float
    mad_extracted: float
    median_tracked: float
    median_filtered: float
    median_observation_s: float
    median_search_s: float
    median_reaction_ms: float
    filter_reduction: float
    histogram: list[tuple[int, int, float]] = field(default_factory=list)


def mad(values: Sequence[float]) -> float:
    x = np.asarray(values, dtype=float)
    return float(np.median(np.abs(x - np.median(x))))


def reaction_histogram(reaction_ms: Iterable[float]) -> list[tuple[int, int, float]]:
    x = np.asarray([r for r in reaction_ms if not math.isnan(r)], dtype=float)
    if not len(x):
        return []
    bins = np.floor(x).astype(np.int64)
    uniq, counts = np.unique(bins, return_counts=True)
    top = counts.max()
    return [(int(b), int(c), float(c / top)) for b, c in zip(uniq, counts)]


def summarize(reports: Sequence[AttackReport]) -> SummaryStats:
    if not reports:
        raise ValueError("cannot summarize an empty report list")
    pages = [r.extracted_pages for r in reports]
    tracked = np.array([r.tracked_pages for r in reports], dtype=float)
    filtered = np.array([r.filtered_pages for r in reports], dtype=float)
    ok = tracked > 0
    reduction = float(np.mean(1 - filtered[ok] / tracked[ok])) if ok.any() else 0.0
    reactions = [r.reaction_ms for r in reports if not math.isnan(r.reaction_ms)]
    return SummaryStats(
        count=len(reports),
        success_rate=sum(r.success for r in reports) / len(reports),
        median_extracted=float(np.median(pages)),
        mad_extracted=mad(pages),
        median_tracked=float(np.median(tracked)),
        median_filtered=float(np.median(filtered)),
        median_observation_s=float(np.median([r.observation_ms for r in reports])) / 1000,
        median_search_s=float(np.median([r.search_ms for r in reports])) / 1000,
        median_reaction_ms=float(np.median(reactions)) if reactions else math.nan,
        filter_reduction=reduction,
        histogram=reaction_histogram(reactions),
    )


def write_results_csv(reports: Iterable[AttackReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_COLUMNS)
        for r in sorted(reports, key=lambda r: (r.scenario, r.load_level, r.iteration)):
            w.writerow(r.row())


def write_histogram_csv(stats: SummaryStats, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HIST_COLUMNS)
        for b, c, n in stats.histogram:
            w.writerow([b, c, f"{n:.6f}"])


def stats_dict(stats: SummaryStats) -> dict:
    d = asdict(stats)
    d.pop("histogram")
    return d
