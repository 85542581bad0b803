"""The ablation benchmark: how much each pipeline stage adds to tracking accuracy.

Runs four pipeline variants on five synthetic seeds and prints mean TA and
TE. Expect about five minutes on one core; pass fewer seeds to go faster,
e.g. ``python demos/06_ablation.py 0 1``.
"""
import logging
import sys

from heattrack import benchmark

logging.basicConfig(level=logging.INFO, format="%(message)s")
seeds = tuple(int(s) for s in sys.argv[1:]) or (0, 1, 2, 3, 4)
table = benchmark.run_ablation(seeds)
print(benchmark.format_table(table))
