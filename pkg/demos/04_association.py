"""Linking detections across frames as a gated assignment problem.

Each source (a frame-t detection moved by the displacement field) may link to
at most one target (a frame t+1 detection) closer than the gate, scored
1 - distance / gate. The best conflict-free set is found exactly.
"""
import numpy as np

from heattrack import assoc

# Two neighbouring cells swap sides: source 0 truly moves to target 0 and
# source 1 to target 1. From raw positions the best links are the wrong,
# crossed pair; after warping, each source sits next to its true successor.
raw = np.array([(10.0, 20.0, 4.0), (16.0, 20.0, 4.0)])
targets = np.array([(15.0, 21.0, 4.0), (10.5, 20.0, 4.0)])
print("raw links:   ", assoc.solve(assoc.build_hypotheses(raw, targets)).matches)
warped = np.array([(14.6, 20.8, 4.0), (10.8, 20.1, 4.0)])
print("warped links:", assoc.solve(assoc.build_hypotheses(warped, targets)).matches)

# The exact solver agrees with exhaustive enumeration.
rng = np.random.default_rng(5)
worst = 0.0
for _ in range(100):
    prob = assoc.build_hypotheses(rng.uniform(0, 15, (5, 3)), rng.uniform(0, 15, (5, 3)))
    if len(prob) > assoc.ORACLE_LIMIT:
        continue
    gap = assoc.objective(prob, assoc.brute_force_oracle(prob)) - assoc.objective(prob, assoc.solve(prob))
    worst = max(worst, abs(gap))
print("largest objective gap to brute force:", worst)

# The linear-programming relaxation lands on the same integral optimum.
prob = assoc.build_hypotheses(rng.uniform(0, 15, (8, 3)), rng.uniform(0, 15, (8, 3)))
a, b = assoc.solve(prob), assoc.solve_relaxed(prob)
print(f"{len(prob)} hypotheses; assignment {assoc.objective(prob, a):.4f}, LP {assoc.objective(prob, b):.4f}")
print("unmatched sources end their tracks:", a.unmatched_source,
      "unmatched targets start new ones:", a.unmatched_target)
