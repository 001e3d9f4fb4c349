"""Run every injectable fault through detection, coordination and localization.

    python demos/signature_suite.py [--window 4] [--seed 0]

One line per fault: the trigger, and which ranks and functions were flagged
next to the ground truth recorded by the simulator.
"""
from __future__ import annotations

import argparse
from collections import defaultdict
from dataclasses import replace

from diffprof.cli import run_e2e
from diffprof.config import ToolkitConfig
from diffprof.simulator import ClusterSpec, FaultKind, FaultSpec, Scenario

CASES = [
    ("healthy", ClusterSpec(), []),
    ("slow NIC bond", ClusterSpec(), [FaultSpec(FaultKind.SLOW_NIC_BOND, {"host": 1, "bond": 2}, 0.5)]),
    ("GPU throttle", ClusterSpec(workers=64, hosts=8),
     [FaultSpec(FaultKind.GPU_THROTTLE, {"hosts": [1, 2]}, 0.6)]),
    ("NVLink down", ClusterSpec(), [FaultSpec(FaultKind.NVLINK_DOWN, {"worker": 9}, 0.5)]),
    ("async GC", ClusterSpec(), [FaultSpec(FaultKind.ASYNC_GC, {}, 0.2, probability=0.02)]),
    ("load imbalance", ClusterSpec(), [FaultSpec(FaultKind.LOAD_IMBALANCE, {}, 0.1)]),
]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--window", type=float, default=4.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for name, cluster, faults in CASES:
        sc = Scenario(replace(cluster, window_seconds=args.window), faults, args.seed)
        cfg = replace(ToolkitConfig(), window_seconds=args.window, rng_seed=args.seed)
        doc = run_e2e(sc, cfg, 60, 60)
        trig = doc["extra"]["trigger"]
        print(f"== {name}: trigger={trig['kind'] if trig else None} "
              f"findings={len(doc['findings'])}")
        truth = doc["extra"]["ground_truth"]
        for kind, ranks in truth["targets"].items():
            print(f"   injected {kind} on {ranks}")
        by = defaultdict(set)
        for f in doc["findings"]:
            by[(f["function"]["kind"], f["function"]["name"], f["reason"])].add(f["rank"])
        for (kind, fn, reason), ranks in sorted(by.items()):
            print(f"   {reason:<18} {kind:<4} {fn[:40]:<40} ranks {sorted(ranks)}")
        if name == "load imbalance":
            d = doc["distributions"]["comm:inter ncclAllReduce_RING"]
            print(f"   ring collective beta {d['beta']['min']:.3f}..{d['beta']['max']:.3f}, "
                  f"mu {d['mu']['min']:.3f}..{d['mu']['max']:.3f}")


if __name__ == "__main__":
    main()
