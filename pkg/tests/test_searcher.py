import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sevtrace.analyzers import aes_expand_key, encrypt_block
from sevtrace.config import Distribution
from sevtrace.mem_model import PAGE_SIZE, AesKey, GuestMemory, SecretSpec, place_secret
from sevtrace.searcher import (CUTOFF, EXHAUSTED, FOUND, CachedAnalyzer, FdeKeyAnalyzer,
                               SearchConfig, cutoff_order, oracle_position, preprocess, search)
from sevtrace.tracker import RecordArrays

KEY = bytes(range(16))
PROBE = (bytes(16), encrypt_block(KEY, bytes(16)))
CONST = Distribution("constant", value=100.0)


def memory_with_key(page=5, offset=64, num_pages=32):
    mem = GuestMemory(num_pages, seed=1)
    place_secret(mem, SecretSpec(AesKey(128, KEY), page, offset))
    return mem


def analyzer():
    return FdeKeyAnalyzer(128, PROBE, use_key_context=False)


def records(pages, types=None, times=None, stop=None):
    types = types or ["read"] * len(pages)
    times = times or list(range(len(pages)))
    return RecordArrays.from_records(list(zip(pages, times, types)), stop_time=stop)


def test_preprocess_filters_and_orders():
    rec = records([1, 2, 3, 4], ["read", "execute", "write", "read"])
    out = preprocess(rec, SearchConfig())
    assert out.pages.tolist() == [4, 3, 1]
    out = preprocess(rec, SearchConfig(filter_writes=True, prioritize_reads=True))
    assert out.pages.tolist() == [4, 1]
    out = preprocess(rec, SearchConfig(filter_execute=False, prioritize_reads=True))
    assert out.pages.tolist() == [4, 1, 3, 2]


def test_cutoff_order():
    rec = records([1, 2, 3, 4], times=[0.0, 50.0, 80.0, 95.0], stop=100.0)
    cands = preprocess(rec, SearchConfig())
    order, n = cutoff_order(cands, 100.0, 30.0)
    assert cands.pages[order].tolist() == [4, 3, 2, 1] and n == 2
    cands2 = RecordArrays(cands.pages[::-1], cands.times[::-1], cands.types, 100.0)
    order, n = cutoff_order(cands2, 100.0, 30.0)
    assert cands2.pages[order].tolist() == [3, 4, 1, 2]


def test_pipelined_timing():
    mem = memory_with_key()
    cfg = SearchConfig(extract_latency=CONST, analysis_ms=30.0, early_cutoff_ms=None)
    res = search(preprocess(records([9, 5, 7, 8]), cfg), mem, analyzer(), cfg, start_ms=0.0)
    # order 8, 7, 5: E = 100, 200, 300 and the last analysis ends at 330
    assert res.outcome == FOUND and res.position == 3 and res.page == 5
    assert res.search_duration_ms == pytest.approx(330.0)
    assert res.requests_made == 3 and res.candidate.material == KEY
    # analysis slower than extraction is the bottleneck
    slow = SearchConfig(extract_latency=CONST, analysis_ms=150.0, early_cutoff_ms=None)
    res = search(preprocess(records([9, 5, 7, 8]), slow), mem, analyzer(), slow, start_ms=0.0)
    assert res.search_duration_ms == pytest.approx(100 + 3 * 150)


def test_exhausted_and_cutoff_outcomes():
    mem = memory_with_key()
    cfg = SearchConfig(extract_latency=CONST, analysis_ms=1.0)
    res = search(preprocess(records([1, 2], stop=10.0), cfg), mem, analyzer(), cfg)
    assert res.outcome == EXHAUSTED and res.extracted_pages == 2
    rc = SearchConfig(extract_latency=CONST, analysis_ms=1.0, restart_on_cutoff=True)
    rec = records([5, 1, 2], times=[0.0, 90.0, 95.0], stop=100.0)
    res = search(preprocess(rec, rc), mem, analyzer(), rc)
    assert res.outcome == CUTOFF and res.extracted_pages == 2


@pytest.mark.parametrize("offset", [PAGE_SIZE - 100, PAGE_SIZE - 1])
@pytest.mark.parametrize("order", [[5, 6], [6, 5]])
def test_boundary_secret(offset, order):
    mem = memory_with_key(page=5, offset=offset)
    cfg = SearchConfig(extract_latency=CONST, analysis_ms=1.0, early_cutoff_ms=None)
    res = search(preprocess(records(order[::-1]), cfg), mem, analyzer(), cfg)
    assert res.outcome == FOUND and res.extracted_pages == 2
    assert res.page == 5 and res.candidate.offset == offset


def test_cached_analyzer_reuses_pristine_pages():
    mem = memory_with_key()
    cached = CachedAnalyzer(analyzer())
    cfg = SearchConfig(extract_latency=CONST, analysis_ms=1.0, early_cutoff_ms=None)
    cands = preprocess(records([1, 2, 3, 5]), cfg)
    for _ in range(2):
        assert search(cands, mem, cached, cfg).outcome == FOUND
    assert cached.misses == 1 and cached.hits == 1
    # content identity, not page number, keys the cache
    cached2 = CachedAnalyzer(analyzer())
    assert cached2.analyze(aes_expand_key(KEY, 128)) is not None


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.sampled_from(["read", "write", "execute"])),
                min_size=1, max_size=40),
       st.booleans(), st.booleans(), st.booleans())
def test_search_position_matches_oracle(recs, fx, fw, prio):
    mem = memory_with_key(page=5, offset=8)
    times = sorted(np.random.default_rng(len(recs)).uniform(0, 100, len(recs)).tolist())
    rows = [(p, t, k) for (p, k), t in zip(recs, times)]
    cfg = SearchConfig(filter_execute=fx, filter_writes=fw, prioritize_reads=prio,
                       extract_latency=CONST, analysis_ms=1.0, early_cutoff_ms=30.0)
    arr = RecordArrays.from_records(rows, stop_time=100.0)
    res = search(preprocess(arr, cfg), mem, analyzer(), cfg)
    want = oracle_position(rows, 5, cfg, stop_time=100.0)
    assert (res.extracted_pages if res.found else None) == want
