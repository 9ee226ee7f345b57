"""Guest-physical memory with a second-level translation map and planted secrets.

Page contents are materialized lazily: an unmodified host page is generated on
demand from ``(seed, host page index)``, so a 2 GiB guest costs nothing until
pages are read or written.
"""
from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Union

import numpy as np

PAGE_SIZE = 4096

PERM_READ = 1
PERM_WRITE = 2
PERM_EXECUTE = 4
PERM_ALL = PERM_READ | PERM_WRITE | PERM_EXECUTE

# Synthetic kernel key record: two kernel pointers, key length, padding, an
# opaque 16-byte field, then the key itself. Not the layout of any real kernel.
KEY_CONTEXT_HEADER = 40
KEY_CONTEXT_ADDR_OFFSETS = (0, 8)
KEY_CONTEXT_LEN_OFFSET = 16
KEY_CONTEXT_KEY_LENGTHS = (16, 32, 64)
KERNEL_ADDR_MIN = 0xFFFF_8000_0000_0000
KERNEL_ADDR_MAX = 0xFFFF_FFFF_FFFF_FFFF

MAX_SPAN_PAGES = 2


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class SlatEntry:
    host_page: int
    permissions: int
    tracked: bool


@dataclass(frozen=True)
class RsaFactor:
    modulus: int
    factor: int
    factor_bits: int
    endianness: str = "little"

    def __post_init__(self):
        if not 1 < self.factor < self.modulus:
            raise PlacementError("factor must satisfy 1 < factor < modulus")
        if self.modulus % self.factor:
            raise PlacementError("factor does not divide modulus")
        if self.endianness not in ("little", "big"):
            raise PlacementError(f"unknown endianness {self.endianness!r}")
        if self.factor.bit_length() > self.width * 8:
            raise PlacementError("factor wider than factor_bits")

    @property
    def width(self) -> int:
        return (self.factor_bits + 7) // 8

    def encode(self) -> bytes:
        return self.factor.to_bytes(self.width, self.endianness)


@dataclass(frozen=True)
class AesKey:
    variant: int
    key: bytes
    store_schedule: bool = True

    def __post_init__(self):
        if self.variant not in (128, 256) or len(self.key) != self.variant // 8:
            raise PlacementError("AES key length does not match variant")

    def encode(self) -> bytes:
        if not self.store_schedule:
            return bytes(self.key)
        from sevtrace.analyzers.aes import aes_expand_key

        return aes_expand_key(self.key, self.variant)


@dataclass(frozen=True)
class KeyContext:
    key: bytes
    addresses: tuple[int, int] = (0xFFFF_9A3C_1F40_2000, 0xFFFF_9A3C_1F40_2A80)
    opaque: bytes = bytes(16)

    def __post_init__(self):
        if len(self.key) not in KEY_CONTEXT_KEY_LENGTHS:
            raise PlacementError(f"key length {len(self.key)} not in {KEY_CONTEXT_KEY_LENGTHS}")
        if any(not KERNEL_ADDR_MIN <= a <= KERNEL_ADDR_MAX for a in self.addresses):
            raise PlacementError("key-context addresses must be canonical kernel addresses")
        if len(self.opaque) != 16:
            raise PlacementError("opaque field is 16 bytes")

    def encode(self) -> bytes:
        head = struct.pack("<QQI4x", self.addresses[0], self.addresses[1], len(self.key))
        return head + self.opaque + bytes(self.key)


SecretKind = Union[RsaFactor, AesKey, KeyContext]


@dataclass(frozen=True)
class SecretSpec:
    kind: SecretKind
    page: int
    offset: int
    purge_at_ms: float | None = None


@dataclass(frozen=True)
class Placement:
    page: int
    offset: int
    length: int
    pages: frozenset[int]
    material: bytes


class GuestMemory:
    """Simulated guest-physical memory.

    ``slat`` is kept as three parallel arrays indexed by guest page number:
    host page index, permission bits and the tracked flag.
    """

    page_size = PAGE_SIZE

    def __init__(self, num_pages: int, seed: int | None = None,
                 zero_mask: np.ndarray | None = None):
        if num_pages < 0:
            raise ValueError("num_pages must be nonnegative")
        if zero_mask is not None and len(zero_mask) != num_pages:
            raise ValueError("zero_mask must have one entry per page")
        self.num_pages = num_pages
        self.seed = seed
        # host pages flagged here read as zeros (free memory handed out zero-filled)
        self.zero_mask = zero_mask
        self.host_page = np.arange(num_pages, dtype=np.int64)
        self.permissions = np.full(num_pages, PERM_ALL, dtype=np.uint8)
        self.tracked = np.zeros(num_pages, dtype=bool)
        self._host: dict[int, bytearray] = {}
        self._purges: list[tuple[float, int, int, int, int]] = []
        self._purge_seq = 0
        self.clock_ms = 0.0
        self.session = None
        self._map_dirty = False

    # -- translation ---------------------------------------------------
    def slat(self, gpa_page: int) -> SlatEntry:
        self._check(gpa_page)
        return SlatEntry(int(self.host_page[gpa_page]), int(self.permissions[gpa_page]),
                         bool(self.tracked[gpa_page]))

    def remap(self, gpa_page: int, host_page: int) -> None:
        self._check(gpa_page)
        self._check(host_page)
        self.host_page[gpa_page] = host_page
        self._map_dirty = True

    def _check(self, page: int) -> None:
        if not 0 <= page < self.num_pages:
            raise IndexError(f"page {page} out of range [0, {self.num_pages})")

    # -- host page storage ---------------------------------------------
    def _generate(self, host: int) -> bytes:
        if self.seed is None or (self.zero_mask is not None and self.zero_mask[host]):
            return bytes(PAGE_SIZE)
        rng = np.random.default_rng((self.seed & 0xFFFF_FFFF_FFFF_FFFF, host))
        return rng.bytes(PAGE_SIZE)

    def host_bytes(self, host: int) -> bytes:
        buf = self._host.get(host)
        return bytes(buf) if buf is not None else self._generate(host)

    def is_pristine(self, host: int) -> bool:
        """True when the host page still holds its generated contents."""
        return host not in self._host

    def content_key(self, gpa_page: int):
        """Hashable identity of a pristine page's contents, or None once written."""
        host = int(self.host_page[gpa_page])
        if host in self._host:
            return None
        if self.seed is None or (self.zero_mask is not None and self.zero_mask[host]):
            return ("zero",)
        return ("gen", self.seed, host)

    def _writable(self, host: int) -> bytearray:
        buf = self._host.get(host)
        if buf is None:
            buf = self._host[host] = bytearray(self._generate(host))
        return buf

    def reset_contents(self, seed: int | None) -> None:
        self.seed = seed
        self._host.clear()

    def checkpoint(self) -> tuple:
        """Snapshot contents, translation map and pending purges (not tracking state)."""
        return ({h: bytes(b) for h, b in self._host.items()}, self.host_page.copy(),
                self.permissions.copy(), list(self._purges), self._purge_seq, self.clock_ms)

    def restore(self, state: tuple) -> None:
        host, hp, perms, purges, seq, clock = state
        self._host = {h: bytearray(b) for h, b in host.items()}
        if self._map_dirty:
            self.host_page[:] = hp
            self.permissions[:] = perms
            self._map_dirty = False
        self._purges = list(purges)
        self._purge_seq = seq
        self.clock_ms = clock
        self.tracked[:] = False
        self.session = None

    # -- guest view ----------------------------------------------------
    def read_page(self, gpa_page: int) -> bytes:
        self._check(gpa_page)
        return self.host_bytes(int(self.host_page[gpa_page]))

    def write(self, gpa_page: int, offset: int, data: bytes) -> frozenset[int]:
        """Write ``data`` at a guest location; returns the guest pages touched."""
        touched = set()
        pos = 0
        page, off = gpa_page, offset
        while pos < len(data):
            self._check(page)
            n = min(PAGE_SIZE - off, len(data) - pos)
            buf = self._writable(int(self.host_page[page]))
            buf[off:off + n] = data[pos:pos + n]
            touched.add(page)
            pos += n
            page, off = page + 1, 0
        return frozenset(touched)

    # -- purges --------------------------------------------------------
    def schedule_purge(self, at_ms: float, gpa_page: int, offset: int, length: int) -> None:
        pos = 0
        page, off = gpa_page, offset
        while pos < length:
            n = min(PAGE_SIZE - off, length - pos)
            host = int(self.host_page[page])
            heapq.heappush(self._purges, (at_ms, self._purge_seq, host, off, n))
            self._purge_seq += 1
            pos += n
            page, off = page + 1, 0

    def next_purge_ms(self) -> float | None:
        return self._purges[0][0] if self._purges else None

    def advance_to(self, t_ms: float) -> None:
        """Move the memory clock forward, zeroing every secret due by ``t_ms``."""
        while self._purges and self._purges[0][0] <= t_ms:
            _, _, host, off, n = heapq.heappop(self._purges)
            self._writable(host)[off:off + n] = bytes(n)
        self.clock_ms = max(self.clock_ms, t_ms)

    # -- export --------------------------------------------------------
    def iter_pages(self) -> Iterable[bytes]:
        for gpa in range(self.num_pages):
            yield self.read_page(gpa)

    def export_dump(self, out: BinaryIO) -> int:
        """Write all guest pages in ascending order, no header. Returns bytes written."""
        total = 0
        for page in self.iter_pages():
            out.write(page)
            total += len(page)
        return total


def fill_random(mem: GuestMemory, seed: int) -> GuestMemory:
    mem.reset_contents(seed)
    return mem


def place_secret(mem: GuestMemory, spec: SecretSpec) -> Placement:
    material = spec.kind.encode()
    if not 0 <= spec.page < mem.num_pages or not 0 <= spec.offset < PAGE_SIZE:
        raise PlacementError(f"placement ({spec.page}, {spec.offset}) out of range")
    end = spec.offset + len(material)
    span = (end + PAGE_SIZE - 1) // PAGE_SIZE
    if span > MAX_SPAN_PAGES:
        raise PlacementError(f"secret spans {span} pages, at most {MAX_SPAN_PAGES} allowed")
    if spec.page + span > mem.num_pages:
        raise PlacementError("secret runs past the last guest page")
    pages = mem.write(spec.page, spec.offset, material)
    if spec.purge_at_ms is not None:
        mem.schedule_purge(spec.purge_at_ms, spec.page, spec.offset, len(material))
    return Placement(spec.page, spec.offset, len(material), pages, material)


def read_page(mem: GuestMemory, gpa_page: int) -> bytes:
    return mem.read_page(gpa_page)
