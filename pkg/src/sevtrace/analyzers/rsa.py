"""Private-factor search: find byte windows whose integer value divides a modulus.

Every window is a candidate, so the scan is two compiled passes. A rolling
residue pass drops windows sharing a small prime with the window value that
the modulus lacks (such a value cannot divide it). Survivors get a Hensel
screen: for odd ``v`` the quotient limbs are fixed low to high by
``N * v^-1 mod 2^32``. When ``v | N`` those limbs are the true quotient, so the
highest one computed must agree with a floating-point estimate of ``N / v``;
computing only as many limbs as that comparison needs halves the work. Small
operands take the full Hensel division instead. Hits are re-checked with
Python integers before they are reported.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numba
import numpy as np

from sevtrace.analyzers.types import KeyCandidate, KeyKind, as_array

_SIEVE_LIMIT = 38          # primes past ~40 cost more in the rolling pass than they save
_TABLE_LIMIT = 1 << 16


def _odd_primes(limit: int) -> list[int]:
    return [p for p in range(3, limit) if all(p % d for d in range(2, int(p ** 0.5) + 1))]


@lru_cache(maxsize=64)
def _residue_tables(modulus: int, width: int, little: bool):
    """Per-group lookup tables for the rolling residue pass.

    Primes not dividing the modulus are packed into group moduli below 2**16;
    every table entry fits in uint16, so the pass needs no integer division.
    """
    primes = [p for p in _odd_primes(_SIEVE_LIMIT) if modulus % p]
    groups, cur, prod = [], [], 1
    for p in primes:
        if prod * p >= _TABLE_LIMIT:
            groups.append(cur)
            cur, prod = [], 1
        cur.append(p)
        prod *= p
    if cur:
        groups.append(cur)
    # a group modulus must exceed 255 so a raw byte is already reduced
    groups = [g for g in groups if int(np.prod(g)) > 256] or [[]]
    size = max(int(np.prod(g)) for g in groups) if groups[0] else 1
    k = len(groups) if groups[0] else 0
    moduli = np.ones(k, dtype=np.int64)
    step = np.zeros((k, size), dtype=np.uint16)   # r -> r * 256^-1 (LE) or r * 256 (BE)
    edge = np.zeros((k, 256), dtype=np.uint16)    # b -> b * 256^(width-1)
    bad = np.zeros((k, size), dtype=np.bool_)     # residue divisible by a group prime
    for i, g in enumerate(groups[:k]):
        m = int(np.prod(g))
        moduli[i] = m
        r = np.arange(m, dtype=np.int64)
        factor = pow(256, -1, m) if little else 256
        step[i, :m] = (r * factor) % m
        edge[i] = (np.arange(256, dtype=np.int64) * pow(256, width - 1, m)) % m
        hit = np.zeros(m, dtype=bool)
        for p in g:
            hit |= (r % p) == 0
        bad[i, :m] = hit
    return moduli, step, edge, bad


@numba.njit(cache=True)
def _residue_filter(buf, width, little, need_odd, moduli, step, edge, bad, out):
    n_windows = buf.shape[0] - width + 1
    k = moduli.shape[0]
    res = np.zeros(k, dtype=np.int64)
    for g in range(k):
        m = moduli[g]
        r = 0
        if little:
            for i in range(width - 1, -1, -1):
                r = (r * 256 + buf[i]) % m
        else:
            for i in range(width):
                r = (r * 256 + buf[i]) % m
        res[g] = r
    low = 0 if little else width - 1
    for o in range(n_windows):
        ok = True
        if need_odd:
            ok = (buf[o + low] & 1) == 1
        for g in range(k):
            if bad[g, res[g]]:
                ok = False
        out[o] = ok
        if o + 1 < n_windows:
            head = np.int64(buf[o])
            tail = np.int64(buf[o + width])
            for g in range(k):
                m = moduli[g]
                if little:
                    r = res[g] - head
                    if r < 0:
                        r += m
                    r = np.int64(step[g, r]) + np.int64(edge[g, tail])
                else:
                    r = res[g] - np.int64(edge[g, head])
                    if r < 0:
                        r += m
                    r = np.int64(step[g, r]) + tail
                if r >= m:
                    r -= m
                res[g] = r


@numba.njit(cache=True)
def _hensel_divides(buf, offsets, width, little, nlimbs, nbits, out):
    # limbs are 32-bit values held in int64 with lazily propagated carries
    mask = np.uint64(0xFFFFFFFF)
    sh = np.uint64(32)
    n = nlimbs.shape[0]
    vmax = (width + 3) // 4
    v = np.zeros(vmax, dtype=np.uint64)
    a = np.zeros(n + 1, dtype=np.int64)
    nf = 0.0
    if n >= 3:
        nf = (float(nlimbs[n - 1]) * 18446744073709551616.0 + float(nlimbs[n - 2]) * 4294967296.0
              + float(nlimbs[n - 3]))
    for idx in range(offsets.shape[0]):
        o = offsets[idx]
        out[idx] = False
        for j in range(vmax):
            acc = np.uint64(0)
            for b in range(3, -1, -1):
                kb = 4 * j + b
                acc <<= np.uint64(8)
                if kb < width:
                    acc |= np.uint64(buf[o + kb] if little else buf[o + width - 1 - kb])
            v[j] = acc
        m = vmax
        while m > 0 and v[m - 1] == 0:
            m -= 1
        if m == 0 or m > n or (m == 1 and v[0] <= 1):
            continue
        v0 = v[0]
        if (v0 & np.uint64(1)) == 0:
            continue
        inv = v0
        for _ in range(5):
            inv = (inv * (np.uint64(2) - v0 * inv)) & mask
        vbits = 32 * (m - 1) + math.frexp(float(v[m - 1]))[1]
        qbits = nbits - vbits + 1
        if qbits < 1:
            continue
        # short form: quotient limbs below 2**(32*lq) by Hensel, top limb
        # cross-checked against a floating-point estimate of N / v
        lq = (qbits - 16 + 31) // 32
        short = m >= 3 and n >= 3 and lq >= 2 and lq < n - m + 1
        if not short:
            lq = n - m + 1
        for j in range(min(n, lq + 1) if short else n):
            a[j] = np.int64(nlimbs[j])
        a[n] = 0
        for i in range(lq):
            if i > 0:
                a[i] += a[i - 1] >> 32
            qi = (np.uint64(a[i]) * inv) & mask
            top = qi
            # limbs at or above lq never feed a quotient digit in short form
            jm = min(m, lq - i) if short else m
            for j in range(jm):
                p = qi * v[j]
                a[i + j] -= np.int64(p & mask)
                a[i + j + 1] -= np.int64(p >> sh)
        if short:
            vf = (float(v[m - 1]) * 18446744073709551616.0 + float(v[m - 2]) * 4294967296.0
                  + float(v[m - 3]))
            est = math.ldexp(nf / vf, 32 * (n - 3) - 32 * (m - 3) - 32 * (lq - 1))
            d = (np.uint64(np.int64(math.floor(est))) - top) & mask
            out[idx] = d == 0 or d == 1 or d == mask
            continue
        carry = a[n - m] >> 32
        zero = True
        for j in range(n - m + 1, n + 1):
            x = a[j] + carry
            if (x & 0xFFFFFFFF) != 0 and j < n:
                zero = False
                break
            carry = x >> 32
            if j == n and x != 0:
                zero = False
        out[idx] = zero


def _limbs(value: int) -> np.ndarray:
    n = max(1, (value.bit_length() + 31) // 32)
    return np.frombuffer(value.to_bytes(4 * n, "little"), dtype="<u4").astype(np.uint64)


def _check_endianness(endianness: str) -> None:
    if endianness not in ("little", "big"):
        raise ValueError(f"endianness must be 'little' or 'big', got {endianness!r}")


def _slow_offsets(buf: np.ndarray, modulus: int, width: int, endianness: str,
                  stride: int) -> list[int]:
    raw = buf.tobytes()
    hits = []
    for o in range(0, len(raw) - width + 1, stride):
        v = int.from_bytes(raw[o:o + width], endianness)
        if 1 < v < modulus and modulus % v == 0:
            hits.append(o)
    return hits


def scan_rsa_factor(chunk, modulus: int, factor_bits: int, endianness: str = "little",
                    stride: int = 1) -> list[KeyCandidate]:
    """Return every window of ``ceil(factor_bits / 8)`` bytes whose value ``v``
    satisfies ``1 < v < modulus`` and ``modulus % v == 0``, in offset order."""
    _check_endianness(endianness)
    if modulus <= 3 or factor_bits < 2 or stride < 1:
        raise ValueError("need modulus > 3, factor_bits >= 2 and stride >= 1")
    buf = as_array(chunk)
    width = (factor_bits + 7) // 8
    if len(buf) < width:
        return []
    if modulus % 2 == 0:
        offsets = _slow_offsets(buf, modulus, width, endianness, stride)
    else:
        little = endianness == "little"
        moduli, step, edge, bad = _residue_tables(modulus, width, little)
        keep = np.zeros(len(buf) - width + 1, dtype=np.bool_)
        _residue_filter(buf, width, little, True, moduli, step, edge, bad, keep)
        if stride > 1:
            keep[np.arange(len(keep)) % stride != 0] = False
        survivors = np.flatnonzero(keep)
        hit = np.zeros(len(survivors), dtype=np.bool_)
        _hensel_divides(buf, survivors, width, little, _limbs(modulus), modulus.bit_length(), hit)
        offsets = survivors[hit].tolist()
    out = []
    for o in offsets:
        material = buf[o:o + width].tobytes()
        v = int.from_bytes(material, endianness)
        if 1 < v < modulus and modulus % v == 0:
            out.append(KeyCandidate(KeyKind.RSA_FACTOR, o, material, 0))
    return out


def candidate_value(candidate: KeyCandidate, endianness: str = "little") -> int:
    return int.from_bytes(candidate.material, endianness)


def complete_rsa_key(factor: int, modulus: int) -> tuple[int, int]:
    if not 1 < factor < modulus or modulus % factor:
        raise ValueError("factor must be a proper divisor of modulus")
    other = modulus // factor
    return (min(factor, other), max(factor, other))
