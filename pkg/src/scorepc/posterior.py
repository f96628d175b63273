"""Order-based structure-learning harness over per-node marginal backends.

Backends answer marginal/zero/one queries on one node's parent-set
distribution; trained circuits and DP tables are interchangeable here.
A DP backend restricted to a candidate set only supports parents inside
that set, so the harness pins every other predecessor to Zero when it
builds ordering and sampling queries -- the restriction that candidate-
limited learners impose on their search space.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .bge import LocalScorer, score_graph
from .circuit import Circuit, evaluate_batch
from .dp import DpTable
from .patterns import MARGINALIZED, ONE, ZERO, QueryPattern, position_of
from .synthesis import Dag


class BackendError(Exception):
    """A backend returned inconsistent masses (conditional outside [0, 1])."""


@dataclass(frozen=True)
class Ordering:
    sigma: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.sigma) != list(range(len(self.sigma))):
            raise ValueError("sigma must be a permutation of 0..d-1")


class CircuitBackend:
    """Marginal queries served by a trained circuit; full support."""

    def __init__(self, target: int, circuit: Circuit):
        self.target = target
        self.circuit = circuit
        self.support = None  # all variables

    def query_states(self, states: np.ndarray) -> float:
        return float(evaluate_batch(self.circuit, states[None, :])[0])

    def query_states_batch(self, states: np.ndarray) -> np.ndarray:
        return evaluate_batch(self.circuit, states)

    def query(self, pattern: QueryPattern) -> float:
        if pattern.target != self.target:
            raise ValueError("pattern target does not match the backend")
        return self.query_states(pattern.as_array())


class DpBackend:
    """Marginal queries served by an exact DP table.

    Rejects patterns that assign One/Marginalized outside the candidate
    set; `support` exposes the candidate members so the harness can
    build admissible queries.
    """

    def __init__(self, table: DpTable):
        self.table = table
        self.target = table.candidate_set.target
        members = table.candidate_set.members
        self.support = (
            None
            if len(members) == table.num_vars
            else frozenset(members)
        )

    def query_states(self, states: np.ndarray) -> float:
        return self.table.query_states(states)

    def query_states_batch(self, states: np.ndarray) -> np.ndarray:
        return np.array([self.table.query_states(s) for s in states])

    def query(self, pattern: QueryPattern) -> float:
        if pattern.target != self.target:
            raise ValueError("pattern target does not match the backend")
        return self.query_states(pattern.as_array())


def _ordering_states(backend, sigma, position: int, num_vars: int) -> np.ndarray:
    """Predecessors marginalized (where supported), everything else Zero."""
    target = sigma[position]
    states = np.zeros(num_vars, dtype=np.int8)
    support = backend.support
    for j in sigma[:position]:
        if support is None or j in support:
            states[position_of(j, target)] = MARGINALIZED
    return states


def score_ordering(backends: list, sigma) -> float:
    """Sum over nodes of the mass of all parent sets consistent with sigma."""
    sigma = tuple(sigma.sigma if isinstance(sigma, Ordering) else sigma)
    d = len(backends)
    if sorted(sigma) != list(range(d)):
        raise ValueError("sigma must be a permutation of the backend indices")
    total = 0.0
    for position in range(d):
        backend = backends[sigma[position]]
        states = _ordering_states(backend, sigma, position, d - 1)
        total += backend.query_states(states)
    return total


def order_mcmc(
    backends: list,
    iterations: int,
    burn_in: int,
    thin: int,
    seed,
) -> list[Ordering]:
    """Metropolis-Hastings over orderings with adjacent-transposition moves.

    The proposal is symmetric, so acceptance is the score ratio.  Only the
    two swapped positions change their predecessor sets, so the score
    delta needs two fresh queries per proposal.  Each step is lazy with
    probability 1/2: pure transposition chains flip permutation parity
    deterministically, which would make the chain periodic.
    """
    if iterations <= burn_in:
        raise ValueError("iterations must exceed burn_in")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    d = len(backends)
    rng = np.random.default_rng(seed)
    sigma = list(rng.permutation(d))
    num_vars = d - 1
    contrib = np.empty(d)
    for position in range(d):
        backend = backends[sigma[position]]
        contrib[position] = backend.query_states(
            _ordering_states(backend, sigma, position, num_vars)
        )
    chain = []
    for _ in range(iterations):
        if d > 1 and rng.random() < 0.5:
            p = int(rng.integers(d - 1))
            proposal = sigma.copy()
            proposal[p], proposal[p + 1] = proposal[p + 1], proposal[p]
            new_lo = backends[proposal[p]].query_states(
                _ordering_states(backends[proposal[p]], proposal, p, num_vars)
            )
            new_hi = backends[proposal[p + 1]].query_states(
                _ordering_states(backends[proposal[p + 1]], proposal, p + 1, num_vars)
            )
            delta = new_lo + new_hi - contrib[p] - contrib[p + 1]
            if delta >= 0 or np.log(rng.random()) < delta:
                sigma = proposal
                contrib[p], contrib[p + 1] = new_lo, new_hi
        chain.append(Ordering(tuple(sigma)))
    return chain[burn_in::thin]


def sample_parent_sets(
    backend, sigma, position: int, count: int, seed
) -> np.ndarray:
    """Batch variant of sample_parents; returns (count, d-1) complete states.

    Sequential conditioning over the predecessors in sigma: each supported
    predecessor is assigned One with probability
    exp(query(j=One, rest marginalized) - query(j marginalized)).
    """
    sigma = tuple(sigma.sigma if isinstance(sigma, Ordering) else sigma)
    d = len(sigma)
    target = sigma[position]
    rng = np.random.default_rng(seed)
    base = _ordering_states(backend, sigma, position, d - 1)
    states = np.tile(base, (count, 1))
    for j in sigma[:position]:
        if backend.support is not None and j not in backend.support:
            continue
        pos = position_of(j, target)
        q_marg = backend.query_states_batch(states)
        with_one = states.copy()
        with_one[:, pos] = ONE
        q_one = backend.query_states_batch(with_one)
        p_one = np.exp(q_one - q_marg)
        if np.any(p_one < -1e-9) or np.any(p_one > 1 + 1e-9):
            raise BackendError(
                f"conditional for variable {j} outside [0, 1]: "
                f"range [{p_one.min():.3g}, {p_one.max():.3g}]"
            )
        take_one = rng.random(count) < np.clip(p_one, 0.0, 1.0)
        states[:, pos] = np.where(take_one, ONE, ZERO)
    return states


def sample_parents(backend, sigma, position: int, seed) -> QueryPattern:
    """Draw one complete parent pattern consistent with the ordering."""
    sigma_t = tuple(sigma.sigma if isinstance(sigma, Ordering) else sigma)
    states = sample_parent_sets(backend, sigma_t, position, 1, seed)[0]
    return QueryPattern.from_states(states, sigma_t[position])


def sample_dag(backends: list, sigma, seed) -> Dag:
    """Assemble a DAG by sampling every node's parents given the ordering."""
    sigma_t = tuple(sigma.sigma if isinstance(sigma, Ordering) else sigma)
    d = len(sigma_t)
    rng = np.random.default_rng(seed)
    edges = []
    for position in range(d):
        target = sigma_t[position]
        states = sample_parent_sets(
            backends[target], sigma_t, position, 1, rng.integers(2**32)
        )[0]
        pattern = QueryPattern.from_states(states, target)
        for parent in pattern.parent_variables():
            edges.append((parent, target))
    return Dag(d, frozenset(edges))


# ---------------------------------------------------------------------------
# CPDAGs and evaluation metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cpdag:
    node_count: int
    directed: frozenset[tuple[int, int]]
    undirected: frozenset[tuple[int, int]]  # stored with low index first

    def __post_init__(self):
        for a, b in self.directed | self.undirected:
            if a == b:
                raise ValueError("self-loops are not allowed")
        unordered_directed = {(min(a, b), max(a, b)) for a, b in self.directed}
        if unordered_directed & self.undirected:
            raise ValueError("an edge cannot be both directed and undirected")


def dag_to_cpdag(dag: Dag) -> Cpdag:
    """Skeleton plus v-structures, closed under the Meek orientation rules."""
    d = dag.node_count
    adj = dag.adjacency()
    # partially directed graph: pd[a, b] means a -> b or (with pd[b, a]) a - b
    pd = adj | adj.T
    skeleton = pd.copy()
    for c in range(d):
        parents = np.nonzero(adj[:, c])[0]
        for a, b in itertools.combinations(parents, 2):
            if not skeleton[a, b]:
                pd[c, a] = False
                pd[c, b] = False
    # Meek rules 1-3, applied one orientation at a time until a fixpoint;
    # starting from v-structure orientations alone these three are complete
    while True:
        directed = pd & ~pd.T
        undirected = pd & pd.T
        oriented = False
        for a, b in zip(*np.nonzero(undirected)):
            # rule 1: c -> a, a - b, c and b non-adjacent  =>  a -> b
            fire = np.any(directed[:, a] & ~skeleton[:, b] & (np.arange(d) != b))
            # rule 2: a -> c -> b with a - b  =>  a -> b
            fire = fire or np.any(directed[a] & directed[:, b])
            if not fire:
                # rule 3: a - c -> b, a - e -> b, c and e non-adjacent => a -> b
                mids = np.nonzero(undirected[a] & directed[:, b])[0]
                fire = any(
                    not skeleton[c, e]
                    for c, e in itertools.combinations(mids, 2)
                )
            if fire:
                pd[b, a] = False
                oriented = True
                break
        if not oriented:
            break
    directed = pd & ~pd.T
    undirected = pd & pd.T
    return Cpdag(
        d,
        frozenset((int(a), int(b)) for a, b in zip(*np.nonzero(directed))),
        frozenset(
            (int(a), int(b))
            for a, b in zip(*np.nonzero(undirected))
            if a < b
        ),
    )


def _pair_states(cpdag: Cpdag) -> dict[tuple[int, int], int]:
    """State per unordered pair: 0 none, 1 low->high, 2 high->low, 3 undirected."""
    states = {}
    for a, b in cpdag.directed:
        lo, hi = min(a, b), max(a, b)
        states[(lo, hi)] = 1 if a == lo else 2
    for a, b in cpdag.undirected:
        states[(a, b)] = 3
    return states


def shd_cpdag(a: Cpdag, b: Cpdag) -> int:
    """Pairs whose edge state differs; direction mismatches count one each."""
    sa, sb = _pair_states(a), _pair_states(b)
    return sum(
        1 for pair in set(sa) | set(sb) if sa.get(pair, 0) != sb.get(pair, 0)
    )


def expected_shd(dag_samples: list[Dag], truth: Dag) -> float:
    """Mean CPDAG structural Hamming distance of the samples to the truth."""
    if not dag_samples:
        raise ValueError("need at least one sampled DAG")
    truth_cpdag = dag_to_cpdag(truth)
    return float(
        np.mean([shd_cpdag(dag_to_cpdag(g), truth_cpdag) for g in dag_samples])
    )


def edge_marginals(dag_samples: list[Dag], d: int) -> np.ndarray:
    """Fraction of sampled DAGs containing each directed edge."""
    counts = np.zeros((d, d))
    for g in dag_samples:
        for p, c in g.edges:
            counts[p, c] += 1
    return counts / len(dag_samples)


def edge_auroc(dag_samples: list[Dag], truth: Dag) -> float:
    """AUROC of posterior directed-edge marginals against the true edges.

    Computed with the rank statistic; tied scores receive average ranks,
    which makes an uninformative backend score exactly 0.5.
    """
    d = truth.node_count
    marginals = edge_marginals(dag_samples, d)
    scores, labels = [], []
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            scores.append(marginals[i, j])
            labels.append((i, j) in truth.edges)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("truth must contain both present and absent edges")
    order = np.argsort(scores, kind="stable")
    sorted_scores = np.asarray(scores)[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mll(dag_samples: list[Dag], test_scorer: LocalScorer) -> float:
    """Log mean likelihood of held-out data under the sampled structures."""
    if not dag_samples:
        raise ValueError("need at least one sampled DAG")
    scores = np.array([score_graph(test_scorer, g) for g in dag_samples])
    shift = scores.max()
    return float(shift + np.log(np.mean(np.exp(scores - shift))))
