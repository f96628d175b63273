import itertools
import math

import numpy as np
import pytest

from scorepc.bge import LocalScorer, compute_stats
from scorepc.dp import (
    CandidateSet,
    DpTable,
    RestrictionError,
    build_table,
    dp_query,
    select_candidates,
)
from scorepc.patterns import MARGINALIZED, ONE, ZERO, QueryPattern
from scorepc.synthesis import DataMatrix, generate_er_dag, generate_mechanisms, sample_data


class ToyScorer:
    """Log-score of a parent set is minus its size: B(00)=0, B(01)=B(10)=-1, B(11)=-2."""

    d = 3

    def score_parent_mask(self, child, mask):
        return -float(bin(mask).count("1"))


def make_scorer(d, seed, n=100):
    dag = generate_er_dag(d, 2.0, seed=seed)
    bn = generate_mechanisms(dag, seed=seed + 1)
    return LocalScorer(compute_stats(sample_data(bn, n, seed=seed + 2)))


def brute_force_masses(scorer, candidates):
    """Independent oracle: log-sum-exp over all completions per ternary state."""
    m = candidates.size
    d = scorer.d
    base = {}
    for bits in range(2**m):
        parents = [candidates.members[i] for i in range(m) if bits >> i & 1]
        pattern = QueryPattern.complete(candidates.target, parents, d)
        mask = 0
        for v in pattern.parent_variables():
            mask |= 1 << v
        base[bits] = scorer.score_parent_mask(candidates.target, mask)
    masses = np.empty(3**m)
    for digits in itertools.product([0, 1, 2], repeat=m):
        index = sum(dig * 3**i for i, dig in enumerate(digits))
        ones = sum(1 << i for i, dig in enumerate(digits) if dig == 1)
        marg = [i for i, dig in enumerate(digits) if dig == 2]
        vals = []
        for sub in range(2 ** len(marg)):
            bits = ones
            for j, i in enumerate(marg):
                if sub >> j & 1:
                    bits |= 1 << i
            vals.append(base[bits])
        masses[index] = np.logaddexp.reduce(vals)
    return masses


class TestToyTable:
    """Hand-checkable two-candidate table."""

    def setup_method(self):
        self.table = build_table(ToyScorer(), CandidateSet(2, (0, 1)))

    def test_size_and_base_case_count(self):
        assert self.table.masses.shape == (9,)
        pow3 = np.array([1, 3])
        base_indices = [int(d0 + 3 * d1) for d0 in (0, 1) for d1 in (0, 1)]
        assert len(base_indices) == 4

    def test_all_marginalized_mass(self):
        expected = math.log(1 + 2 * math.e**-1 + math.e**-2)  # 0.626523...
        got = dp_query(self.table, QueryPattern.from_string("mm", 2))
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.626523, abs=1e-6)

    def test_marginal_zero_mass(self):
        expected = math.log(1 + math.e**-1)  # 0.313262...
        got = dp_query(self.table, QueryPattern.from_string("m0", 2))
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.313262, abs=1e-6)

    def test_complete_pattern_is_scorer_value(self):
        got = dp_query(self.table, QueryPattern.from_string("11", 2))
        assert got == -2.0


class TestBuildTable:
    def test_rejects_above_cap(self):
        scorer = make_scorer(4, seed=0)
        with pytest.raises(ValueError):
            build_table(scorer, CandidateSet(0, (1, 2, 3)), cap=2)

    def test_oracle_equivalence(self):
        """Every entry matches the brute-force log-sum-exp within 1e-9."""
        scorer = make_scorer(7, seed=1)
        candidates = CandidateSet(3, tuple(v for v in range(7) if v != 3))
        table = build_table(scorer, candidates)
        oracle = brute_force_masses(scorer, candidates)
        np.testing.assert_allclose(table.masses, oracle, atol=1e-9, rtol=0)

    def test_recurrence_holds_for_every_digit(self):
        """Expanding any marginalized digit reproduces the entry."""
        scorer = make_scorer(6, seed=2)
        candidates = CandidateSet(0, (1, 2, 3, 4, 5))
        table = build_table(scorer, candidates)
        pow3 = 3 ** np.arange(5)
        for index in range(3**5):
            digits = (index // pow3) % 3
            for b in np.nonzero(digits == 2)[0]:
                expanded = np.logaddexp(
                    table.masses[index - pow3[b]], table.masses[index - 2 * pow3[b]]
                )
                assert abs(table.masses[index] - expanded) < 1e-9

    def test_monotone_in_relaxation(self):
        """Turning any Zero into Marginalized never decreases the mass."""
        scorer = make_scorer(6, seed=3)
        candidates = CandidateSet(1, (0, 2, 3, 4, 5))
        table = build_table(scorer, candidates)
        pow3 = 3 ** np.arange(5)
        rng = np.random.default_rng(0)
        for _ in range(500):
            digits = rng.integers(0, 3, size=5)
            index = int(digits @ pow3)
            zeros = np.nonzero(digits == 0)[0]
            for b in zeros:
                relaxed = index + 2 * pow3[b]
                assert table.masses[relaxed] >= table.masses[index] - 1e-12


class TestDpQuery:
    def test_fully_assigned_equals_scorer(self):
        scorer = make_scorer(5, seed=4)
        candidates = CandidateSet(2, (0, 1, 3, 4))
        table = build_table(scorer, candidates)
        pattern = QueryPattern.complete(2, [0, 4], 5)
        mask = (1 << 0) | (1 << 4)
        assert dp_query(table, pattern) == pytest.approx(
            scorer.score_parent_mask(2, mask), abs=1e-12
        )

    def test_rejects_one_outside_candidates(self):
        scorer = make_scorer(5, seed=5)
        table = build_table(scorer, CandidateSet(2, (0, 1)))
        pattern = QueryPattern.complete(2, [4], 5)
        with pytest.raises(RestrictionError):
            dp_query(table, pattern)

    def test_rejects_marginalized_outside_candidates(self):
        scorer = make_scorer(5, seed=5)
        table = build_table(scorer, CandidateSet(2, (0, 1)))
        states = np.zeros(4, dtype=np.int8)
        states[3] = MARGINALIZED  # variable 4, outside the candidate set
        with pytest.raises(RestrictionError):
            table.query_states(states)

    def test_rejects_wrong_target(self):
        scorer = make_scorer(5, seed=5)
        table = build_table(scorer, CandidateSet(2, (0, 1)))
        with pytest.raises(ValueError):
            dp_query(table, QueryPattern.from_string("0000", 1))


class TestSelectCandidates:
    def test_full_size_selects_everything(self):
        scorer = make_scorer(5, seed=6)
        cand = select_candidates(scorer, 2, 4)
        assert cand.members == (0, 1, 3, 4)

    def test_empty_candidate_set(self):
        scorer = make_scorer(4, seed=7)
        cand = select_candidates(scorer, 0, 0)
        assert cand.members == ()
        table = build_table(scorer, cand)
        assert table.masses.shape == (1,)

    def test_chain_picks_direct_parent(self):
        """On a strong chain X -> Y -> Z, the best single candidate for Z is Y."""
        rng = np.random.default_rng(0)
        x = rng.standard_normal(500)
        y = 2.0 * x + 0.3 * rng.standard_normal(500)
        z = 2.0 * y + 0.3 * rng.standard_normal(500)
        scorer = LocalScorer(compute_stats(DataMatrix(np.column_stack([x, y, z]))))
        empty = scorer.score_parent_mask(2, 0)
        gain_x = scorer.score_parent_mask(2, 1 << 0) - empty
        gain_y = scorer.score_parent_mask(2, 1 << 1) - empty
        assert gain_y > gain_x
        assert select_candidates(scorer, 2, 1).members == (1,)

    def test_rejects_oversized(self):
        scorer = make_scorer(4, seed=8)
        with pytest.raises(ValueError):
            select_candidates(scorer, 0, 4)


class TestSaveLoad:
    def test_binary_round_trip(self, tmp_path):
        scorer = make_scorer(5, seed=9)
        table = build_table(scorer, CandidateSet(2, (0, 1, 3)))
        prefix = str(tmp_path / "node2")
        table.save(prefix)
        loaded = DpTable.load(prefix)
        np.testing.assert_array_equal(loaded.masses, table.masses)
        assert loaded.candidate_set == table.candidate_set
        assert loaded.num_vars == table.num_vars
