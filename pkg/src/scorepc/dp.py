"""Exact dynamic-programming marginalizer over a candidate parent set.

Stores the log-mass of every joint zero/one/marginalized assignment of
the candidates in a ternary-indexed table: digit i of the index is the
state of the i-th candidate (0 = zero, 1 = one, 2 = marginalized).
Variables outside the candidate set are pinned to zero, which is the
restriction that makes the table tractable (and that candidate-limited
structure learners inherit).
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .bge import LocalScorer, local_score
from .patterns import MARGINALIZED, ONE, ZERO, QueryPattern, position_of

HARD_CANDIDATE_CAP = 16


class RestrictionError(Exception):
    """Query touches a variable outside the table's candidate set."""


@dataclass(frozen=True)
class CandidateSet:
    target: int
    members: tuple[int, ...]

    def __post_init__(self):
        if self.target in self.members:
            raise ValueError("target cannot be its own candidate parent")
        if len(set(self.members)) != len(self.members):
            raise ValueError("candidate members must be distinct")

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class DpTable:
    candidate_set: CandidateSet
    num_vars: int  # pattern length, d - 1
    masses: np.ndarray = field(repr=False)
    _positions: np.ndarray = field(repr=False)  # pattern position per member
    _outside: np.ndarray = field(repr=False)  # pattern positions not covered

    def query_states(self, states: np.ndarray) -> float:
        """O(1) lookup; `states` is a length-num_vars int array."""
        if states.shape[0] != self.num_vars:
            raise ValueError("pattern length mismatch")
        if np.any(states[self._outside] != ZERO):
            raise RestrictionError(
                "pattern assigns One/Marginalized outside the candidate set"
            )
        digits = states[self._positions].astype(np.int64)
        index = int(digits @ (3 ** np.arange(self.candidate_set.size, dtype=np.int64)))
        return float(self.masses[index])

    def save(self, path_prefix: str) -> None:
        """Binary masses blob plus a JSON sidecar describing the candidate set."""
        with open(path_prefix + ".bin", "wb") as fh:
            fh.write(self.masses.astype("<f8").tobytes())
        with open(path_prefix + ".json", "w") as fh:
            json.dump(
                {
                    "target": self.candidate_set.target,
                    "members": list(self.candidate_set.members),
                    "num_vars": self.num_vars,
                },
                fh,
            )

    @classmethod
    def load(cls, path_prefix: str) -> "DpTable":
        with open(path_prefix + ".json") as fh:
            meta = json.load(fh)
        candidates = CandidateSet(meta["target"], tuple(meta["members"]))
        masses = np.frombuffer(
            open(path_prefix + ".bin", "rb").read(), dtype="<f8"
        ).astype(float)
        if masses.shape[0] != 3 ** candidates.size:
            raise ValueError("masses blob size does not match the candidate set")
        return _make_table(candidates, meta["num_vars"], masses)


def _make_table(candidates: CandidateSet, num_vars: int, masses: np.ndarray) -> DpTable:
    positions = np.array(
        [position_of(v, candidates.target) for v in candidates.members], dtype=np.int64
    )
    outside = np.setdiff1d(np.arange(num_vars), positions)
    return DpTable(candidates, num_vars, masses, positions, outside)


def select_candidates(scorer: LocalScorer, target: int, size: int) -> CandidateSet:
    """Top `size` variables by singleton score gain over the empty parent set."""
    d = scorer.d
    if size > d - 1:
        raise ValueError("candidate size cannot exceed d - 1")
    empty = scorer.score_parent_mask(target, 0)
    gains = []
    for j in range(d):
        if j == target:
            continue
        gains.append((scorer.score_parent_mask(target, 1 << j) - empty, j))
    gains.sort(key=lambda t: (-t[0], t[1]))
    members = tuple(sorted(j for _, j in gains[:size]))
    return CandidateSet(target, members)


def build_table(
    scorer: LocalScorer, candidates: CandidateSet, cap: int = HARD_CANDIDATE_CAP
) -> DpTable:
    """Fill the full ternary table bottom-up.

    Base cases (no marginalized digit) come from the scorer; every other
    entry expands its lowest-index marginalized digit b via
    mass(A) = logaddexp(mass(A with b=1), mass(A with b=0)).
    """
    m = candidates.size
    if m > cap:
        raise ValueError(f"candidate set size {m} exceeds the cap of {cap}")
    d = scorer.d
    num_vars = d - 1
    pow3 = 3 ** np.arange(m, dtype=np.int64)
    masses = np.empty(3**m, dtype=float)

    # base cases: every fully-assigned index is a complete-pattern score
    for bits in range(2**m):
        parents = [candidates.members[i] for i in range(m) if bits >> i & 1]
        pattern = QueryPattern.complete(candidates.target, parents, d)
        index = int(sum(pow3[i] for i in range(m) if bits >> i & 1))
        masses[index] = local_score(scorer, candidates.target, pattern)

    # recurrence, grouped by the set of marginalized digits; within a group the
    # remaining digits range over all binary assignments, vectorized
    for k in range(1, m + 1):
        for marg in itertools.combinations(range(m), k):
            rest = [i for i in range(m) if i not in marg]
            base = int(sum(2 * pow3[i] for i in marg))
            offsets = np.zeros(1, dtype=np.int64)
            for p in rest:
                offsets = np.concatenate([offsets, offsets + pow3[p]])
            idx = base + offsets
            b = pow3[marg[0]]
            masses[idx] = np.logaddexp(masses[idx - b], masses[idx - 2 * b])

    return _make_table(candidates, num_vars, masses)


def dp_query(table: DpTable, pattern: QueryPattern) -> float:
    """Constant-time log-mass lookup for a marginal/zero/one pattern."""
    if pattern.target != table.candidate_set.target:
        raise ValueError("pattern target does not match the table")
    return table.query_states(pattern.as_array())
