"""Ground-truth DAGs, linear Gaussian mechanisms and sampled data matrices."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Dag:
    """Directed acyclic graph over nodes 0..d-1."""

    node_count: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        for p, c in self.edges:
            if p == c:
                raise ValueError(f"self-loop at node {p}")
            if not (0 <= p < self.node_count and 0 <= c < self.node_count):
                raise ValueError(f"edge ({p}, {c}) outside node range")
        self.topological_order()  # raises on cycles

    def parents_of(self, node: int) -> tuple[int, ...]:
        return tuple(sorted(p for p, c in self.edges if c == node))

    def children_of(self, node: int) -> tuple[int, ...]:
        return tuple(sorted(c for p, c in self.edges if p == node))

    def topological_order(self) -> list[int]:
        """Kahn's algorithm; raises ValueError if the edge set has a cycle."""
        indeg = [0] * self.node_count
        for _, c in self.edges:
            indeg[c] += 1
        ready = sorted(i for i in range(self.node_count) if indeg[i] == 0)
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for c in self.children_of(v):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort()
        if len(order) != self.node_count:
            raise ValueError("edge set contains a directed cycle")
        return order

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count), dtype=bool)
        for p, c in self.edges:
            a[p, c] = True
        return a

    def to_json(self) -> str:
        return json.dumps(
            {"d": self.node_count, "edges": sorted([p, c] for p, c in self.edges)}
        )

    @classmethod
    def from_json(cls, text: str) -> "Dag":
        obj = json.loads(text)
        return cls(obj["d"], frozenset((int(p), int(c)) for p, c in obj["edges"]))


@dataclass(frozen=True)
class GroundTruthBn:
    """Linear Gaussian Bayesian network: weights per edge, noise variance per node."""

    dag: Dag
    edge_weights: dict[tuple[int, int], float]
    noise_variances: tuple[float, ...]

    def __post_init__(self):
        if set(self.edge_weights) != set(self.dag.edges):
            raise ValueError("weight map keys must equal the DAG edge set")
        if len(self.noise_variances) != self.dag.node_count:
            raise ValueError("one noise variance per node required")
        if any(v <= 0 for v in self.noise_variances):
            raise ValueError("noise variances must be strictly positive")

    def to_json(self) -> str:
        return json.dumps(
            {
                "weights": sorted(
                    [p, c, w] for (p, c), w in self.edge_weights.items()
                ),
                "variances": list(self.noise_variances),
            }
        )


@dataclass(frozen=True)
class DataMatrix:
    """n observations by d variables, all entries finite."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("data must be a 2-d matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("data entries must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j]

    def to_csv(self, path: str) -> None:
        np.savetxt(path, self.values, delimiter=",", fmt="%.17g")

    @classmethod
    def from_csv(cls, path: str) -> "DataMatrix":
        values = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
        return cls(values)


def generate_er_dag(d: int, avg_edges_per_node: float, seed: int) -> Dag:
    """Random DAG: uniform topological order, forward edges kept i.i.d.

    The inclusion probability is chosen so the expected number of edges is
    avg_edges_per_node * d.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if avg_edges_per_node < 0:
        raise ValueError("avg_edges_per_node must be >= 0")
    rng = np.random.default_rng(seed)
    order = rng.permutation(d)
    n_pairs = d * (d - 1) // 2
    if n_pairs == 0:
        return Dag(d, frozenset())
    p = min(1.0, max(0.0, avg_edges_per_node * d / n_pairs))
    keep = rng.random(n_pairs) < p
    edges = []
    k = 0
    for i in range(d):
        for j in range(i + 1, d):
            if keep[k]:
                edges.append((int(order[i]), int(order[j])))
            k += 1
    return Dag(d, frozenset(edges))


def generate_mechanisms(dag: Dag, seed: int) -> GroundTruthBn:
    """Edge weights uniform on +-[0.5, 2.0], noise variances uniform on [0.5, 2.0]."""
    rng = np.random.default_rng(seed)
    weights = {}
    for edge in sorted(dag.edges):
        magnitude = rng.uniform(0.5, 2.0)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        weights[edge] = sign * magnitude
    variances = tuple(rng.uniform(0.5, 2.0) for _ in range(dag.node_count))
    return GroundTruthBn(dag, weights, variances)


def sample_data(bn: GroundTruthBn, n: int, seed: int) -> DataMatrix:
    """Ancestral sampling in topological order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    d = bn.dag.node_count
    x = np.zeros((n, d))
    noise = rng.standard_normal((n, d)) * np.sqrt(np.asarray(bn.noise_variances))
    for node in bn.dag.topological_order():
        x[:, node] = noise[:, node]
        for parent in bn.dag.parents_of(node):
            x[:, node] += bn.edge_weights[(parent, node)] * x[:, parent]
    return DataMatrix(x)
