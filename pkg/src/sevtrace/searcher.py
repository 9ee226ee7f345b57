"""Search phase: order the tracked pages, extract them newest first, analyze each.

Extraction and analysis form a two-stage pipeline. With ``E_i`` the time
extraction ``i`` completes and ``a`` the per-page analysis time::

    E_i = E_{i-1} + e_i
    A_i = max(A_{i-1}, E_i) + a

and a search that succeeds on page ``k`` lasts ``A_k``. Analysis of page ``i``
overlaps extraction of page ``i + 1``, so the total is about ``sum(e) + a``
when ``a <= e``. The extraction already in flight when the secret turns up is
abandoned and not counted as a request.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Protocol

import numpy as np

from sevtrace.analyzers import (KeyCandidate, KeyKind, scan_aes_schedules, scan_key_context,
                                scan_rsa_factor, schedule_length, verify_key_candidate)
from sevtrace.config import ACCESS_EXECUTE, ACCESS_READ, ACCESS_WRITE, Distribution, SearchSettings
from sevtrace.mem_model import KEY_CONTEXT_HEADER, PAGE_SIZE, GuestMemory
from sevtrace.tracker import RecordArrays

FOUND, EXHAUSTED, CUTOFF = "found", "exhausted", "cutoff"


# -- analyzers ---------------------------------------------------------------

class Analyzer(Protocol):
    max_span: int

    def analyze(self, chunk: bytes) -> KeyCandidate | None: ...


@dataclass
class RsaFactorAnalyzer:
    modulus: int
    factor_bits: int
    endianness: str = "little"

    @property
    def max_span(self) -> int:
        return (self.factor_bits + 7) // 8

    def analyze(self, chunk: bytes) -> KeyCandidate | None:
        hits = scan_rsa_factor(chunk, self.modulus, self.factor_bits, self.endianness)
        return hits[0] if hits else None


@dataclass
class FdeKeyAnalyzer:
    """AES schedules and key-context records, each checked with a known-answer probe."""
    variant: int
    probe: tuple[bytes, bytes]
    use_key_context: bool = True

    @property
    def max_span(self) -> int:
        span = schedule_length(self.variant)
        return max(span, KEY_CONTEXT_HEADER + 64) if self.use_key_context else span

    def analyze(self, chunk: bytes) -> KeyCandidate | None:
        cands = scan_aes_schedules(chunk, self.variant)
        if self.use_key_context:
            cands = sorted(cands + scan_key_context(chunk), key=lambda c: c.offset)
        for c in cands:
            if verify_key_candidate(c, self.probe):
                return c
        return None


class CachedAnalyzer:
    """Memoizes an analyzer by chunk digest. Results depend on bytes only."""

    def __init__(self, inner: Analyzer, cache: dict | None = None):
        self.inner = inner
        self.cache = {} if cache is None else cache
        self.hits = self.misses = 0

    @property
    def max_span(self) -> int:
        return self.inner.max_span

    def analyze(self, chunk: bytes, key=None) -> KeyCandidate | None:
        if key is None:
            key = hashlib.blake2b(chunk, digest_size=16).digest()
        try:
            out = self.cache[key]
            self.hits += 1
        except KeyError:
            out = self.cache[key] = self.inner.analyze(chunk)
            self.misses += 1
        return out

    def analyze_page(self, memory: GuestMemory, gpa_page: int) -> tuple[KeyCandidate | None, bytes | None]:
        """Analyze a guest page, skipping the read when a pristine page is cached.

        Returns the candidate and the bytes read (None when served by identity).
        """
        key = memory.content_key(gpa_page)
        if key is not None and key in self.cache:
            self.hits += 1
            return self.cache[key], None
        data = memory.read_page(gpa_page)
        return self.analyze(data, key), data


# -- preprocessing -----------------------------------------------------------

@dataclass(frozen=True)
class SearchConfig:
    filter_execute: bool = True
    filter_writes: bool = False
    prioritize_reads: bool = False
    early_cutoff_ms: float | None = 30.0
    restart_on_cutoff: bool = False
    extract_latency: Distribution = field(
        default_factory=lambda: Distribution("triangular", median=123.0, spread=30.0))
    analysis_ms: float = 50.0
    exclude_pages: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.analysis_ms < 0:
            raise ValueError("analysis_ms must be nonnegative")
        if self.early_cutoff_ms is not None and self.early_cutoff_ms <= 0:
            raise ValueError("early_cutoff_ms must be positive when set")

    @classmethod
    def from_settings(cls, s: SearchSettings, analysis_ms: float, **kw) -> "SearchConfig":
        return cls(s.filter_execute, s.filter_writes, s.prioritize_reads, s.early_cutoff_ms,
                   s.restart_on_cutoff, s.extract_latency, analysis_ms, **kw)


def preprocess(records, config: SearchConfig) -> RecordArrays:
    """Newest-first candidate list after filtering and stable prioritization."""
    arr = records if isinstance(records, RecordArrays) else RecordArrays.from_records(records)
    idx = np.arange(len(arr))[::-1]
    keep = np.ones(len(idx), dtype=bool)
    types = arr.types[idx]
    if config.filter_execute:
        keep &= types != ACCESS_EXECUTE
    if config.filter_writes:
        keep &= types != ACCESS_WRITE
    if config.exclude_pages:
        keep &= ~np.isin(arr.pages[idx], np.fromiter(config.exclude_pages, np.int64))
    idx = idx[keep]
    if config.prioritize_reads:
        idx = idx[np.argsort(arr.types[idx] != ACCESS_READ, kind="stable")]
    return arr.take(idx)


# -- extraction --------------------------------------------------------------

class Extractor:
    """Latency-modeled page extraction oracle with a request counter."""

    def __init__(self, memory: GuestMemory, latency: Distribution, rng: np.random.Generator):
        self.memory = memory
        self.latency = latency
        self.rng = rng
        self.requests = 0
        self._buf: list[float] = []

    def sample(self) -> float:
        if not self._buf:
            self._buf = self.latency.sample(self.rng, size=64).tolist()[::-1]
        return self._buf.pop()

    def read(self, gpa_page: int, at_ms: float) -> bytes:
        self.requests += 1
        self.memory.advance_to(at_ms)
        return self.memory.read_page(gpa_page)

    def analyze(self, gpa_page: int, at_ms: float, analyzer) -> tuple[KeyCandidate | None, bytes | None]:
        """Extract and analyze in one step; cached analyzers may skip the read."""
        if not isinstance(analyzer, CachedAnalyzer):
            data = self.read(gpa_page, at_ms)
            return analyzer.analyze(data), data
        self.requests += 1
        self.memory.advance_to(at_ms)
        return analyzer.analyze_page(self.memory, gpa_page)


def extract_page(memory: GuestMemory, gpa_page: int, rng: np.random.Generator,
                 latency: Distribution | None = None) -> tuple[bytes, float]:
    latency = latency or SearchConfig().extract_latency
    return memory.read_page(gpa_page), float(latency.sample(rng))


# -- search ------------------------------------------------------------------

@dataclass
class SearchResult:
    outcome: str
    extracted_pages: int
    requests_made: int
    search_duration_ms: float
    observation_duration_ms: float = 0.0
    candidate: KeyCandidate | None = None
    page: int | None = None
    position: int | None = None       # 1-based position in extraction order
    extracted: list[int] = field(default_factory=list)

    @property
    def found(self) -> bool:
        return self.outcome == FOUND


def cutoff_order(cands: RecordArrays, stop_time: float | None,
                 cutoff_ms: float | None) -> tuple[np.ndarray, int]:
    """Indices with records older than ``stop - cutoff`` moved to the tail.

    Returns the order and how many entries lie inside the cutoff window.
    """
    n = len(cands)
    if cutoff_ms is None or stop_time is None:
        return np.arange(n), n
    recent = cands.times >= stop_time - cutoff_ms
    order = np.concatenate([np.flatnonzero(recent), np.flatnonzero(~recent)])
    return order, int(recent.sum())


def search(candidates: RecordArrays, memory: GuestMemory, analyzer: Analyzer,
           config: SearchConfig, rng: np.random.Generator | int = 0,
           start_ms: float | None = None, observation_ms: float = 0.0) -> SearchResult:
    """Extract candidates in order until the analyzer confirms the secret.

    A secret straddling two pages is caught on the boundary bytes of a newly
    extracted page and an already extracted neighbour.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    stop = candidates.stop_time
    t0 = start_ms if start_ms is not None else (stop if stop is not None else 0.0)
    order, n_recent = cutoff_order(candidates, stop, config.early_cutoff_ms)
    extractor = Extractor(memory, config.extract_latency, rng)
    got: dict[int, bytes | None] = {}
    e_done = a_done = t0
    span = max(1, analyzer.max_span - 1)
    for pos, i in enumerate(order, start=1):
        page = int(candidates.pages[i])
        if page in got or page in config.exclude_pages:
            continue
        if pos > n_recent and config.restart_on_cutoff:
            return SearchResult(CUTOFF, len(got), extractor.requests, a_done - t0,
                                observation_ms, extracted=list(got))
        e_done += extractor.sample()
        cand, data = extractor.analyze(page, e_done, analyzer)
        # pristine pages never change, so their bytes can be re-read on demand
        got[page] = data
        a_done = max(a_done, e_done) + config.analysis_ms
        page_hit = page
        if cand is None and page - 1 in got:
            cand = _boundary(analyzer, _bytes(memory, got, page - 1), _bytes(memory, got, page),
                             span)
            page_hit = page - 1
        if cand is None and page + 1 in got:
            cand = _boundary(analyzer, _bytes(memory, got, page), _bytes(memory, got, page + 1),
                             span)
            page_hit = page
        if cand is not None:
            return SearchResult(FOUND, len(got), extractor.requests, a_done - t0, observation_ms,
                                cand, page_hit, len(got), list(got))
    return SearchResult(EXHAUSTED, len(got), extractor.requests, a_done - t0, observation_ms,
                        extracted=list(got))


def _bytes(memory: GuestMemory, got: dict, page: int) -> bytes:
    data = got[page]
    if data is None:
        data = got[page] = memory.read_page(page)
    return data


def _boundary(analyzer: Analyzer, left: bytes, right: bytes, span: int) -> KeyCandidate | None:
    chunk = left[PAGE_SIZE - span:] + right[:span]
    c = analyzer.analyze(chunk)
    if c is None:
        return None
    # only candidates that actually straddle the boundary are new
    if c.offset >= span or c.offset + c.span <= span:
        return None
    return c.shifted(PAGE_SIZE - span)


def oracle_position(records: Iterable[tuple[int, float, str]], secret_page: int,
                    config: SearchConfig, stop_time: float | None = None) -> int | None:
    """Reference answer for how many pages a search extracts, by direct sorting."""
    recs = list(records)
    rank = {}
    for n, (page, t, kind) in enumerate(recs):
        if config.filter_execute and kind == "execute":
            continue
        if config.filter_writes and kind == "write":
            continue
        if page in config.exclude_pages:
            continue
        late = (config.early_cutoff_ms is not None and stop_time is not None
                and t < stop_time - config.early_cutoff_ms)
        rank[n] = (late, config.prioritize_reads and kind != "read", -n)
    ordered = sorted(rank, key=rank.get)
    seen = set()
    for n in ordered:
        page = recs[n][0]
        if page in seen:
            continue
        seen.add(page)
        if page == secret_page:
            return len(seen)
    return None
