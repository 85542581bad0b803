import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from heattrack import assoc
from heattrack.assoc import AssociationProblem


def problem_from_scores(pairs, scores, n_src, n_tgt):
    i = np.array([p[0] for p in pairs], dtype=np.intp)
    j = np.array([p[1] for p in pairs], dtype=np.intp)
    s = np.asarray(scores, dtype=np.float64)
    return AssociationProblem(np.zeros((n_src, 3)), np.zeros((n_tgt, 3)), i, j,
                              10.0 * (1.0 - s), s, 10.0)


def feasible(problem, result):
    src = [i for i, _ in result.matches]
    tgt = [j for _, j in result.matches]
    hyps = set(zip(problem.src_idx.tolist(), problem.tgt_idx.tolist()))
    return (len(set(src)) == len(src) and len(set(tgt)) == len(tgt)
            and all(m in hyps for m in result.matches))


@st.composite
def gated_instance(draw, max_hyp=assoc.ORACLE_LIMIT):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    n_src = draw(st.integers(0, 7))
    n_tgt = draw(st.integers(0, 7))
    src = rng.uniform(0, 20, (n_src, 3))
    tgt = rng.uniform(0, 20, (n_tgt, 3))
    prob = assoc.build_hypotheses(src, tgt, 10.0)
    if len(prob) > max_hyp:
        keep = np.sort(rng.choice(len(prob), max_hyp, replace=False))
        prob = AssociationProblem(prob.source, prob.target, prob.src_idx[keep], prob.tgt_idx[keep],
                                  prob.distance[keep], prob.score[keep], prob.gate_radius)
    return prob


def test_single_hypothesis_score():
    prob = assoc.build_hypotheses([(0, 0, 0)], [(3, 0, 0)], 10.0)
    assert len(prob) == 1 and prob.score[0] == pytest.approx(0.7)
    assert assoc.solve(prob).matches == [(0, 0)]


def test_gate_excludes_and_empty_sides():
    assert len(assoc.build_hypotheses([(0, 0, 0)], [(12, 0, 0)], 10.0)) == 0
    prob = assoc.build_hypotheses(np.zeros((0, 3)), [(1, 1, 1), (2, 2, 2)])
    res = assoc.solve(prob)
    assert res.matches == [] and res.unmatched_target == [0, 1] and res.unmatched_source == []
    with pytest.raises(ValueError):
        assoc.build_hypotheses([(0, 0, 0)], [(1, 0, 0)], 0.0)


def test_distance_exactly_at_gate_is_excluded():
    assert len(assoc.build_hypotheses([(0, 0, 0)], [(10, 0, 0)], 10.0)) == 0


def test_crossing_case_recovers_identity():
    # A moves next to B's old position and vice versa; with warped sources
    # each source sits nearest its own successor
    warped = np.array([(10.0, 20.0, 4.0), (16.0, 20.0, 4.0)])
    targets = np.array([(10.5, 20.0, 4.0), (15.0, 21.0, 4.0)])
    prob = assoc.build_hypotheses(warped, targets, 10.0)
    assert len(prob) == 4
    best, best_val, n_feasible = None, -1.0, 0
    hyps = list(zip(prob.src_idx.tolist(), prob.tgt_idx.tolist(), prob.score.tolist()))
    for r in range(len(hyps) + 1):
        for subset in itertools.combinations(hyps, r):
            if len({h[0] for h in subset}) < r or len({h[1] for h in subset}) < r:
                continue
            n_feasible += 1
            val = sum(h[2] for h in subset)
            if val > best_val:
                best, best_val = sorted((h[0], h[1]) for h in subset), val
    assert n_feasible == 7
    assert assoc.solve(prob).matches == best == [(0, 0), (1, 1)]


def test_two_by_two_example():
    prob = problem_from_scores([(0, 0), (0, 1), (1, 0), (1, 1)], [0.9, 0.8, 0.85, 0.1], 2, 2)
    for solver in (assoc.solve, assoc.solve_relaxed, assoc.brute_force_oracle):
        res = solver(prob)
        assert res.matches == [(0, 1), (1, 0)]
        assert assoc.objective(prob, res) == pytest.approx(1.65)


def test_oracle_trivial_and_limit():
    empty = problem_from_scores([], [], 0, 0)
    assert assoc.brute_force_oracle(empty).matches == []
    one = problem_from_scores([(0, 0)], [0.5], 1, 1)
    assert assoc.brute_force_oracle(one).matches == [(0, 0)]
    pairs = [(i, j) for i in range(6) for j in range(5)]
    with pytest.raises(assoc.ProblemTooLarge):
        assoc.brute_force_oracle(problem_from_scores(pairs, np.full(30, 0.5), 6, 5))


def test_oracle_tie_break_is_lexicographic():
    prob = problem_from_scores([(0, 0), (0, 1), (1, 0), (1, 1)], [0.5] * 4, 2, 2)
    assert assoc.brute_force_oracle(prob).matches == [(0, 0), (1, 1)]


def test_conflict_matrix_shape():
    prob = problem_from_scores([(0, 0), (0, 1), (1, 1)], [0.3, 0.4, 0.5], 2, 3)
    G = prob.conflict_matrix().toarray()
    assert G.shape == (3, 5)
    np.testing.assert_array_equal(G.sum(axis=1), 2)
    np.testing.assert_array_equal(G[:, :2].sum(axis=0), [2, 1])


@given(gated_instance())
def test_solvers_match_oracle(prob):
    ref = assoc.objective(prob, assoc.brute_force_oracle(prob))
    for solver in (assoc.solve, assoc.solve_relaxed):
        res = solver(prob)
        assert feasible(prob, res)
        assert assoc.objective(prob, res) == pytest.approx(ref, abs=1e-9)
        assert sorted(res.unmatched_source + [i for i, _ in res.matches]) == list(range(prob.n_source))
        assert sorted(res.unmatched_target + [j for _, j in res.matches]) == list(range(prob.n_target))


@given(gated_instance(), st.floats(0.01, 100))
def test_positive_scaling_keeps_argmax(prob, a):
    scaled = AssociationProblem(prob.source, prob.target, prob.src_idx, prob.tgt_idx,
                                prob.distance, a * prob.score, prob.gate_radius)
    assert assoc.solve(scaled).matches == assoc.solve(prob).matches


@given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.floats(0.1, 10), st.floats(-0.5, 5))
def test_affine_invariance_on_complete_square_instances(n, seed, a, b):
    # every maximal matching of a complete n x n instance is perfect, so an
    # increasing affine map of the scores shifts all of them by the same amount
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(n) for j in range(n)]
    s = rng.uniform(0.6, 1.0, n * n)
    base = assoc.solve(problem_from_scores(pairs, s, n, n)).matches
    # offset scaled by a keeps every mapped score positive
    moved = assoc.solve(problem_from_scores(pairs, a * (s + b), n, n)).matches
    assert moved == base


def test_additive_shift_can_change_argmax_with_partial_matchings():
    # one strong pair versus two weak ones: adding a constant favors the larger matching
    prob = problem_from_scores([(0, 0), (0, 1), (1, 0)], [0.9, 0.4, 0.4], 2, 2)
    assert assoc.solve(prob).matches == [(0, 0)]
    shifted = problem_from_scores([(0, 0), (0, 1), (1, 0)], [1.4, 0.9, 0.9], 2, 2)
    assert assoc.solve(shifted).matches == [(0, 1), (1, 0)]


@given(gated_instance())
def test_removing_unused_hypothesis_keeps_optimum(prob):
    res = assoc.solve(prob)
    used = set(res.matches)
    unused = [k for k, h in enumerate(zip(prob.src_idx.tolist(), prob.tgt_idx.tolist())) if h not in used]
    if not unused:
        return
    k = unused[0]
    keep = np.ones(len(prob), dtype=bool)
    keep[k] = False
    smaller = AssociationProblem(prob.source, prob.target, prob.src_idx[keep], prob.tgt_idx[keep],
                                 prob.distance[keep], prob.score[keep], prob.gate_radius)
    assert assoc.objective(smaller, assoc.solve(smaller)) == pytest.approx(assoc.objective(prob, res))


def test_confidence_weighted_scores():
    prob = assoc.build_hypotheses([(0, 0, 0)], [(5, 0, 0)], 10.0, [0.25], [1.0])
    assert prob.score[0] == pytest.approx(0.5 * 0.5)


def test_save_hypotheses(tmp_path):
    prob = assoc.build_hypotheses([(0, 0, 0), (5, 0, 0)], [(1, 0, 0)], 10.0)
    assoc.save_hypotheses(tmp_path / "h.csv", prob, assoc.solve(prob))
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "i,j,distance,score,selected"
    assert lines[1].startswith("0,0,1.0,0.9,1")
    assert lines[2].endswith(",0")
