"""Run (or resume) the cached desk-scale suites used by the acceptance tests.

Usage: python scripts/run_benchmarks.py [mnist] [cifar] [defences] [finetune] [sweeps]
"""
import json
import logging
import sys
import time

from ssba import benchmarks

SUITES = {
    "mnist": benchmarks.mnist_suite,
    "cifar": benchmarks.cifar_suite,
    "defences": benchmarks.defence_suite,
    "finetune": benchmarks.finetune_suite,
    "sweeps": lambda: {axis: benchmarks.sweep_suite(axis) for axis in ("poison_fraction", "cover_fraction")},
}


def main(names):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    for name in names or list(SUITES):
        t0 = time.time()
        result = SUITES[name]()
        print(f"== {name} ({time.time() - t0:.0f}s)\n{json.dumps(result, indent=1, default=str)}", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
