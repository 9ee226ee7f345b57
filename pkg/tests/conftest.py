import math

import numpy as np
import pytest

from sevtrace.config import default_config, from_dict
from sevtrace.simulator import Arrival

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(label, ok: bool, detail: str) -> None:
    ACCEPTANCE[str(label)] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def window_config(window_ms: float = 10.0, delay_ms: float = 0.0, num_pages: int = 4096,
                  horizon_ms: float = 60_000.0, pre_count: int = 40, post_count: int = 40) -> dict:
    """A one-activity world: a disk write that uses an AES key once, then ends
    ``window_ms`` later. Nothing else touches the key page."""
    use = 5.0
    return {
        "memory": {"num_pages": num_pages, "content_seed": 7},
        "horizon_ms": horizon_ms,
        "pools": {"kernel": {"pages": 300, "exec_fraction": 0.22, "write_fraction": 0.3}},
        "secrets": {"fde-key": {"type": "aes", "variant": 256}},
        "templates": {"DiskWrite": {
            "end_event": "DiskImageWrite", "end_event_offset": use + window_ms,
            "uses": [{"offset": use, "secret": "fde-key"}],
            "segments": [{"start": 0.0, "end": use, "pool": "kernel", "count": pre_count},
                         {"start": use, "end": use + window_ms, "pool": "kernel",
                          "count": post_count}]}},
        "workload": {"load_level": 1},
        "detection_delay": {"DiskImageWrite": {"kind": "constant", "value": delay_ms}},
        "scenarios": {"fde": {"activity": "DiskWrite", "secret": "fde-key", "analysis_ms": 2}},
        "search": {"early_cutoff_ms": 30},
    }


def periodic_source(period_ms: float, kind: str = "DiskWrite"):
    """Arrival source with activities at every multiple of ``period_ms``."""
    def source(config, load_level, seed, start_ms):
        k = math.ceil(start_ms / period_ms)
        rng = np.random.default_rng(seed)
        while True:
            yield Arrival(k * period_ms, kind, k, int(rng.integers(2**62)), None)
            k += 1
    return source


@pytest.fixture(scope="session")
def defaults():
    return default_config()


@pytest.fixture
def small_window_config():
    return from_dict(window_config())
