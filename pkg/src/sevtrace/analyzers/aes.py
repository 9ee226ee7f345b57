"""AES key expansion and key-schedule detection in raw memory.

Detection follows the recompute-and-compare idea: treat the bytes at an offset
as a key, expand it, and count bit differences against the bytes that follow.
A vectorized pass over the first derived word rejects almost every offset
before any full expansion is attempted; the first derived word's error count
is a lower bound on the full schedule's.
"""
from __future__ import annotations

import numpy as np

from sevtrace.analyzers.types import KeyCandidate, KeyKind, as_array


def _build_sbox() -> bytes:
    def mul(a, b):
        r = 0
        while b:
            if b & 1:
                r ^= a
            a = ((a << 1) ^ 0x11B) if a & 0x80 else a << 1
            b >>= 1
        return r

    inv = [0] * 256
    for a in range(1, 256):
        for b in range(1, 256):
            if mul(a, b) == 1:
                inv[a] = b
                break
    out = bytearray(256)
    for a in range(256):
        b = inv[a]
        s = b
        for k in range(1, 5):
            s ^= ((b << k) | (b >> (8 - k))) & 0xFF
        out[a] = s ^ 0x63
    return bytes(out)


SBOX = _build_sbox()
_SBOX_NP = np.frombuffer(SBOX, dtype=np.uint8)
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)
RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)

ROUNDS = {128: 10, 256: 14}


def schedule_length(variant: int) -> int:
    return 16 * (ROUNDS[variant] + 1)


def aes_expand_key(key: bytes, variant: int) -> bytes:
    if variant not in ROUNDS:
        raise ValueError(f"unsupported AES variant {variant}")
    nk = variant // 32
    if len(key) != 4 * nk:
        raise ValueError(f"AES-{variant} needs a {4 * nk}-byte key, got {len(key)}")
    total = 4 * (ROUNDS[variant] + 1)
    w = [list(key[4 * i:4 * i + 4]) for i in range(nk)]
    for i in range(nk, total):
        t = list(w[i - 1])
        if i % nk == 0:
            t = [SBOX[t[1]] ^ RCON[i // nk - 1], SBOX[t[2]], SBOX[t[3]], SBOX[t[0]]]
        elif nk > 6 and i % nk == 4:
            t = [SBOX[b] for b in t]
        w.append([a ^ b for a, b in zip(w[i - nk], t)])
    return bytes(b for word in w for b in word)


def bit_errors(a: bytes, b: bytes) -> int:
    x = np.bitwise_xor(np.frombuffer(a, np.uint8), np.frombuffer(b, np.uint8))
    return int(_POPCOUNT[x].sum())


def _first_word_errors(buf: np.ndarray, starts: np.ndarray, nk: int) -> np.ndarray:
    # first derived word = w0 ^ SubWord(RotWord(w[nk-1])) ^ rcon1
    last = 4 * (nk - 1)
    derived = 4 * nk
    err = np.zeros(len(starts), dtype=np.int32)
    for j, rot in enumerate((1, 2, 3, 0)):
        pred = buf[starts + j] ^ _SBOX_NP[buf[starts + last + rot]]
        if j == 0:
            pred = pred ^ np.uint8(RCON[0])
        err += _POPCOUNT[pred ^ buf[starts + derived + j]]
    return err


_BLOCK = 1 << 20


def scan_aes_schedules(chunk, variant: int = 128, tolerance: int = 0,
                       stride: int = 1) -> list[KeyCandidate]:
    if tolerance < 0 or stride < 1:
        raise ValueError("tolerance must be >= 0 and stride >= 1")
    if variant not in ROUNDS:
        raise ValueError(f"unsupported AES variant {variant}")
    buf = as_array(chunk)
    nk = variant // 32
    klen = 4 * nk
    slen = schedule_length(variant)
    last_start = len(buf) - slen
    kind = KeyKind.AES128 if variant == 128 else KeyKind.AES256
    found: list[KeyCandidate] = []
    for lo in range(0, max(last_start + 1, 0), _BLOCK):
        starts = np.arange(lo, min(lo + _BLOCK, last_start + 1), stride, dtype=np.int64)
        if lo % stride:
            starts = starts[(starts % stride) == 0]
        if not len(starts):
            continue
        err = _first_word_errors(buf, starts, nk)
        for o in starts[err <= tolerance].tolist():
            key = buf[o:o + klen].tobytes()
            expanded = aes_expand_key(key, variant)
            score = int(_POPCOUNT[np.frombuffer(expanded, np.uint8)[klen:]
                                  ^ buf[o + klen:o + slen]].sum())
            if score <= tolerance:
                found.append(KeyCandidate(kind, o, key, score, footprint=slen))
    return found
