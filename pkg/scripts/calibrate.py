"""Compare simulated page statistics with the calibration targets.

Runs a reduced matrix (default 200 iterations per cell) and prints median
extracted pages, MAD, tracked pages, observation and search times, success
rate and the execute-filter reduction next to the target values.

    python scripts/calibrate.py [--config FILE] [--iterations N] [--scenario NAME]
"""
from __future__ import annotations

import argparse
import time

from sevtrace.config import load_config
from sevtrace.harness import LOAD_LEVELS, SCENARIOS, Experiment, summarize
from sevtrace.simulator import build_world

# median extracted pages, MAD, median tracked pages (None: not reported)
TARGETS = {
    "tls-nginx": {1: (102, 5), 9: (116, 19), 17: (165, 69), 25: (301, 160), "tracked": (1691, 2085)},
    "tls-apache": {1: (128, 21), 9: (137, 40), 17: (154, 80), 25: (171, 109), "tracked": (1691, 2085)},
    "fde": {1: (70, 8), 9: (71, 9), 17: (70, 8), 25: (69, 9), "tracked": (2526, 3433)},
    "ssh": {1: (7, 1), 9: (7, 1), 17: (7, 1), 25: (7, 1), "tracked": (10102, 11094)},
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--iterations", type=int, default=200)
    ap.add_argument("--scenario", action="append", choices=SCENARIOS)
    ap.add_argument("--loads", type=int, nargs="+", default=list(LOAD_LEVELS))
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    world = build_world(cfg)
    print(f"{'scenario':10s} {'load':>4s} {'pages':>7s} {'mad':>6s} {'target':>10s} "
          f"{'tracked':>8s} {'obs_s':>7s} {'search_s':>8s} {'react':>6s} {'succ':>6s} {'xred':>6s} {'s/it':>6s}")
    for sc in args.scenario or SCENARIOS:
        ex = Experiment(cfg, sc, world)
        for load in args.loads:
            t = time.perf_counter()
            s = summarize(ex.run(load, args.iterations, args.seed))
            dt = (time.perf_counter() - t) / args.iterations
            tp, tm = TARGETS[sc][load]
            print(f"{sc:10s} {load:4d} {s.median_extracted:7.1f} {s.mad_extracted:6.1f} "
                  f"{f'{tp}±{tm}':>10s} {s.median_tracked:8.0f} {s.median_observation_s:7.2f} "
                  f"{s.median_search_s:8.2f} {s.median_reaction_ms:6.1f} {s.success_rate:6.3f} "
                  f"{s.filter_reduction:6.3f} {dt:6.3f}", flush=True)
        lo, hi = TARGETS[sc]["tracked"]
        print(f"{'':10s} tracked target {lo}-{hi}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
