"""Gated one-to-one association of detections between consecutive frames.

Every pair ``(i, j)`` closer than the gate radius becomes a hypothesis with
score ``rho = 1 - d / gate``. Selecting hypotheses is the binary program

    max rho^T x   s.t.   G^T x <= 1,   x in {0, 1}

where each column of ``G`` marks the hypotheses that use one source or one
target. The constraint matrix of a bipartite graph is totally unimodular, so
the LP relaxation has an integral optimum; :func:`solve` finds it with an
assignment solver and :func:`solve_relaxed` solves the relaxation directly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse
from scipy.spatial.distance import cdist

__all__ = [
    "AssociationProblem",
    "AssociationResult",
    "ProblemTooLarge",
    "build_hypotheses",
    "solve",
    "solve_relaxed",
    "brute_force_oracle",
    "objective",
    "save_hypotheses",
]

ORACLE_LIMIT = 25


class ProblemTooLarge(ValueError):
    pass


@dataclass
class AssociationProblem:
    source: np.ndarray
    target: np.ndarray
    src_idx: np.ndarray
    tgt_idx: np.ndarray
    distance: np.ndarray
    score: np.ndarray
    gate_radius: float

    @property
    def n_source(self):
        return len(self.source)

    @property
    def n_target(self):
        return len(self.target)

    def __len__(self):
        return len(self.score)

    def conflict_matrix(self):
        """Sparse ``G`` of shape (n_hypotheses, n_source + n_target)."""
        h = len(self)
        rows = np.concatenate([np.arange(h), np.arange(h)])
        cols = np.concatenate([self.src_idx, self.n_source + self.tgt_idx])
        return sparse.csr_matrix((np.ones(2 * h), (rows, cols)),
                                 shape=(h, self.n_source + self.n_target))


@dataclass
class AssociationResult:
    matches: list = field(default_factory=list)
    unmatched_source: list = field(default_factory=list)
    unmatched_target: list = field(default_factory=list)


def build_hypotheses(source, target, gate_radius=10.0, source_conf=None, target_conf=None):
    """List every gated pair and its score.

    When both confidence arrays are given the distance score is multiplied by
    the geometric mean of the two detection confidences.
    """
    if gate_radius <= 0:
        raise ValueError("gate_radius must be > 0")
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) and len(tgt):
        d = cdist(src, tgt)
        i, j = np.nonzero(d < gate_radius)
        dist = d[i, j]
    else:
        i = j = np.zeros(0, dtype=np.intp)
        dist = np.zeros(0)
    score = 1.0 - dist / gate_radius
    if source_conf is not None and target_conf is not None:
        score = score * np.sqrt(np.asarray(source_conf)[i] * np.asarray(target_conf)[j])
    return AssociationProblem(src, tgt, i.astype(np.intp), j.astype(np.intp), dist, score,
                              float(gate_radius))


def _result(problem, pairs):
    pairs = sorted((int(i), int(j)) for i, j in pairs)
    used_s = {i for i, _ in pairs}
    used_t = {j for _, j in pairs}
    return AssociationResult(
        pairs,
        [i for i in range(problem.n_source) if i not in used_s],
        [j for j in range(problem.n_target) if j not in used_t],
    )


def objective(problem, result) -> float:
    lookup = {(int(i), int(j)): s for i, j, s in zip(problem.src_idx, problem.tgt_idx, problem.score)}
    return math.fsum(lookup[m] for m in result.matches)


def solve(problem: AssociationProblem) -> AssociationResult:
    """Maximum-score conflict-free subset of hypotheses."""
    if len(problem) == 0:
        return _result(problem, [])
    # only rows and columns touched by a hypothesis take part
    rows, src_local = np.unique(problem.src_idx, return_inverse=True)
    cols, tgt_local = np.unique(problem.tgt_idx, return_inverse=True)
    weight = np.zeros((len(rows), len(cols)))
    weight[src_local, tgt_local] = problem.score
    r, c = optimize.linear_sum_assignment(weight, maximize=True)
    # a zero-weight pair is not a hypothesis
    keep = weight[r, c] > 0
    return _result(problem, zip(rows[r[keep]], cols[c[keep]]))


def solve_relaxed(problem: AssociationProblem, tol=1e-6) -> AssociationResult:
    """Solve the LP relaxation ``0 <= x <= 1`` and read off the integral optimum."""
    if len(problem) == 0:
        return _result(problem, [])
    G = problem.conflict_matrix()
    res = optimize.linprog(-problem.score, A_ub=G.T, b_ub=np.ones(G.shape[1]),
                           bounds=(0, 1), method="highs")
    if res.status != 0:
        raise RuntimeError(f"LP relaxation failed: {res.message}")
    x = res.x
    if np.any((x > tol) & (x < 1 - tol)):
        # vertex solutions are integral; a fractional answer means a tie on a face
        return solve(problem)
    sel = x > 0.5
    return _result(problem, zip(problem.src_idx[sel], problem.tgt_idx[sel]))


def brute_force_oracle(problem: AssociationProblem) -> AssociationResult:
    """Enumerate every conflict-free hypothesis subset and return the best.

    Ties on the objective go to the lexicographically smallest match list.
    """
    h = len(problem)
    if h > ORACLE_LIMIT:
        raise ProblemTooLarge(f"{h} hypotheses exceed the oracle limit of {ORACLE_LIMIT}")
    hyps = sorted(zip(problem.src_idx.tolist(), problem.tgt_idx.tolist(), problem.score.tolist()))
    best_val = -1.0
    best = []

    def visit(k, used_s, used_t, chosen):
        nonlocal best_val, best
        if k == h:
            val = math.fsum(s for _, _, s in chosen)
            pairs = [(i, j) for i, j, _ in chosen]
            if val > best_val or (val == best_val and pairs < best):
                best_val, best = val, pairs
            return
        i, j, s = hyps[k]
        if i not in used_s and j not in used_t:
            visit(k + 1, used_s | {i}, used_t | {j}, chosen + [(i, j, s)])
        visit(k + 1, used_s, used_t, chosen)

    visit(0, frozenset(), frozenset(), [])
    return _result(problem, best)


def save_hypotheses(path, problem, result=None):
    """Dump hypotheses as ``i,j,distance,score,selected`` CSV."""
    chosen = set(result.matches) if result is not None else set()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["i", "j", "distance", "score", "selected"])
        for i, j, d, s in zip(problem.src_idx, problem.tgt_idx, problem.distance, problem.score):
            writer.writerow([int(i), int(j), repr(float(d)), repr(float(s)), int((int(i), int(j)) in chosen)])
