"""Scanner for the synthetic kernel key-context record (see ``mem_model``)."""
from __future__ import annotations

import numpy as np

from sevtrace.analyzers.types import KeyCandidate, KeyKind, as_array
from sevtrace.mem_model import (KEY_CONTEXT_ADDR_OFFSETS, KEY_CONTEXT_HEADER,
                                KEY_CONTEXT_KEY_LENGTHS, KEY_CONTEXT_LEN_OFFSET)


def _kernel_pointer(buf: np.ndarray, at: np.ndarray) -> np.ndarray:
    # little-endian u64 >= 0xffff800000000000: top two bytes 0xff, next byte >= 0x80
    return (buf[at + 7] == 0xFF) & (buf[at + 6] == 0xFF) & (buf[at + 5] >= 0x80)


def scan_key_context(chunk, key_lengths=KEY_CONTEXT_KEY_LENGTHS) -> list[KeyCandidate]:
    buf = as_array(chunk)
    last = len(buf) - KEY_CONTEXT_HEADER
    if last < 0:
        return []
    starts = np.arange(last + 1, dtype=np.int64)
    ok = np.ones(len(starts), dtype=bool)
    for field in KEY_CONTEXT_ADDR_OFFSETS:
        ok &= _kernel_pointer(buf, starts + field)
    hits = starts[ok]
    out = []
    for o in hits.tolist():
        at = o + KEY_CONTEXT_LEN_OFFSET
        klen = int.from_bytes(buf[at:at + 4].tobytes(), "little")
        if klen not in key_lengths:
            continue
        key_at = o + KEY_CONTEXT_HEADER
        if key_at + klen > len(buf):
            continue
        out.append(KeyCandidate(KeyKind.KEY_CONTEXT, o, buf[key_at:key_at + klen].tobytes(),
                                0, footprint=KEY_CONTEXT_HEADER + klen))
    return out
