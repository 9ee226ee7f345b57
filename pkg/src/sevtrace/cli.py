"""Command line: batch simulations and standalone dump scanning.

    sevtrace simulate --scenario ssh --load-level 9 --iterations 2000 --seed 1 \\
        --out results.csv --hist hist.csv
    sevtrace scan rsa --modulus-hex modulus.txt --factor-bits 2048 dump.bin
    sevtrace scan aes --variant 256 dump.bin
    sevtrace scan key-context dump.bin
    sevtrace dump --num-pages 4096 --out image.bin

Exit codes: 0 success (also when nothing is found), 1 usage error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import BinaryIO, Callable, Iterator

from sevtrace.analyzers import (KeyCandidate, scan_aes_schedules, scan_key_context,
                                scan_rsa_factor, schedule_length)
from sevtrace.config import ConfigError, load_config
from sevtrace.mem_model import KEY_CONTEXT_HEADER, PAGE_SIZE

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 1, 2
CHUNK_PAGES = 256


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- scanning ----------------------------------------------------------------

def iter_chunks(f: BinaryIO, overlap: int, chunk_pages: int = CHUNK_PAGES) -> Iterator[tuple[int, bytes, int]]:
    """Yield ``(base offset, bytes, owned length)`` over a stream.

    Each chunk carries ``overlap`` bytes of the next one so a candidate that
    straddles a chunk boundary is still seen whole; a chunk reports only
    candidates starting in its first ``owned`` bytes.
    """
    size = chunk_pages * PAGE_SIZE
    base = 0
    buf = f.read(size)
    while buf:
        nxt = f.read(size)
        yield base, buf + nxt[:overlap], len(buf)
        base += len(buf)
        buf = nxt


def scan_stream(f: BinaryIO, scanner: Callable[[bytes], list[KeyCandidate]],
                overlap: int) -> Iterator[KeyCandidate]:
    for base, chunk, owned in iter_chunks(f, overlap):
        for c in scanner(chunk):
            if c.offset < owned:
                yield c.shifted(base)


def format_candidate(c: KeyCandidate) -> str:
    return f"{c.offset} 0x{c.offset:x} {c.kind.value} {c.score} {c.material.hex()}"


def parse_modulus(text_or_path: str) -> int:
    p = Path(text_or_path)
    text = text_or_path
    if len(text_or_path) < 4096 and p.is_file():
        text = p.read_text()
    digits = "".join(text.split()).replace(":", "")
    if digits[:2].lower() == "0x":
        digits = digits[2:]
    try:
        value = int(digits, 16)
    except ValueError:
        raise UsageError("modulus is not valid hexadecimal") from None
    if value <= 3:
        raise UsageError("modulus must be greater than 3")
    return value


def _scan(args) -> int:
    if args.kind == "rsa":
        modulus = parse_modulus(args.modulus_hex)
        if args.factor_bits < 2:
            raise UsageError("--factor-bits must be at least 2")
        width = (args.factor_bits + 7) // 8
        ends = {"le": ["little"], "be": ["big"], "both": ["little", "big"]}[args.endian]

        def scanner(chunk):
            hits = []
            for e in ends:
                hits += scan_rsa_factor(chunk, modulus, args.factor_bits, e, args.stride)
            return sorted(hits, key=lambda c: c.offset)
        overlap = width - 1
    elif args.kind == "aes":
        if args.tolerance < 0:
            raise UsageError("--tolerance must be nonnegative")

        def scanner(chunk):
            return scan_aes_schedules(chunk, args.variant, args.tolerance, args.stride)
        overlap = schedule_length(args.variant) - 1
    else:
        scanner = scan_key_context
        overlap = KEY_CONTEXT_HEADER + 64 - 1
    if getattr(args, "stride", 1) < 1:
        raise UsageError("--stride must be at least 1")
    with open(args.dump, "rb") as f:
        for c in scan_stream(f, scanner, overlap):
            print(format_candidate(c))
    return EXIT_OK


# -- simulation --------------------------------------------------------------

def _simulate(args) -> int:
    from sevtrace.harness import Experiment, summarize, write_histogram_csv, write_results_csv

    cfg = load_config(args.config)
    if args.scenario not in cfg.scenarios:
        raise UsageError(f"scenario {args.scenario!r} not in configuration")
    if args.iterations < 1 or args.load_level <= 0:
        raise UsageError("--iterations must be >= 1 and --load-level > 0")
    ex = Experiment(cfg, args.scenario)
    reports = ex.run(args.load_level, args.iterations, args.seed)
    stats = summarize(reports)
    if args.out:
        write_results_csv(reports, args.out)
    if args.hist:
        write_histogram_csv(stats, args.hist)
    print(f"scenario={args.scenario} load={args.load_level:g} iterations={stats.count} "
          f"success={stats.success_rate:.4%} pages={stats.median_extracted:g}"
          f"±{stats.mad_extracted:g} tracked={stats.median_tracked:g} "
          f"observation={stats.median_observation_s:.2f}s search={stats.median_search_s:.2f}s "
          f"reaction={stats.median_reaction_ms:.1f}ms")
    return EXIT_OK


def _dump(args) -> int:
    from sevtrace.simulator import build_world

    cfg = load_config(args.config)
    if args.num_pages is not None:
        if args.num_pages < 1:
            raise UsageError("--num-pages must be positive")
        cfg = cfg.replace(num_pages=args.num_pages)
    world = build_world(cfg)
    with open(args.out, "wb") as f:
        world.memory.export_dump(f)
    for name, m in sorted(world.secrets.items()):
        if m.placement is not None:
            off = m.placement.page * PAGE_SIZE + m.placement.offset
            print(f"{name} {off} 0x{off:x} {m.placement.length}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sevtrace", description="Page-tracking attack simulator and memory scanners.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run attack iterations and write CSV results")
    sim.add_argument("--scenario", required=True, choices=["tls-nginx", "tls-apache", "fde", "ssh"])
    sim.add_argument("--load-level", type=float, required=True)
    sim.add_argument("--iterations", type=int, default=2000)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--config", default=None, help="YAML configuration (default: bundled)")
    sim.add_argument("--out", default=None, help="per-iteration results CSV")
    sim.add_argument("--hist", default=None, help="reaction-time histogram CSV")
    sim.set_defaults(func=_simulate)

    scan = sub.add_parser("scan", help="scan a raw memory dump for key material")
    kinds = scan.add_subparsers(dest="kind", required=True, parser_class=_Parser)
    rsa = kinds.add_parser("rsa", help="windows dividing an RSA modulus")
    rsa.add_argument("--modulus-hex", required=True, help="hex modulus, or a file containing it")
    rsa.add_argument("--factor-bits", type=int, required=True)
    rsa.add_argument("--endian", choices=["le", "be", "both"], default="le")
    rsa.add_argument("--stride", type=int, default=1)
    rsa.add_argument("dump")
    aes = kinds.add_parser("aes", help="AES key schedules")
    aes.add_argument("--variant", type=int, choices=[128, 256], required=True)
    aes.add_argument("--tolerance", type=int, default=0)
    aes.add_argument("--stride", type=int, default=1)
    aes.add_argument("dump")
    ctx = kinds.add_parser("key-context", help="synthetic kernel key records")
    ctx.add_argument("dump")
    scan.set_defaults(func=_scan)

    dump = sub.add_parser("dump", help="export the configured guest image as a raw dump")
    dump.add_argument("--config", default=None)
    dump.add_argument("--num-pages", type=int, default=None)
    dump.add_argument("--out", required=True)
    dump.set_defaults(func=_dump)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"sevtrace: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"sevtrace: {exc}", file=sys.stderr)
        return EXIT_IO
