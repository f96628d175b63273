"""Log BGe local scores for a child node and arbitrary parent sets.

The local score of child i with parent set Pa is computed as
f(Pa + {i}) - f(Pa), where f(W) is the log marginal likelihood of the
data restricted to the variable subset W under the Gaussian/Wishart
prior.  f is cached per subset bitmask since the same subsets recur
heavily when scoring resampled parent sets and DP base cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .patterns import MARGINALIZED, ONE, QueryPattern
from .synthesis import Dag, DataMatrix


class ScoreError(Exception):
    """Raised when a score evaluates non-finite (singular submatrix)."""


@dataclass(frozen=True)
class ScatterStats:
    """Sufficient statistics: observation count, mean, centered scatter."""

    n: int
    mean: np.ndarray
    scatter: np.ndarray

    @property
    def d(self) -> int:
        return self.mean.shape[0]


def compute_stats(data: DataMatrix) -> ScatterStats:
    if data.n < 1:
        raise ValueError("need at least one observation")
    mean = data.values.mean(axis=0)
    centered = data.values - mean
    scatter = centered.T @ centered
    return ScatterStats(data.n, mean, scatter)


def _logdet_psd(matrix: np.ndarray) -> float:
    """Log-determinant via Cholesky; raises np.linalg.LinAlgError if not PD."""
    if matrix.shape[0] == 0:
        return 0.0
    chol = np.linalg.cholesky(matrix)
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


class LocalScorer:
    """BGe local scores with a uniform structural prior.

    Defaults follow the usual convention that makes the implied prior
    covariance proportional to the identity: alpha_w = d + 2 and
    prior_scale = t * I with t = alpha_mu * (alpha_w - d - 1) / (alpha_mu + 1).

    Immutable after construction; the two internal caches only memoize
    deterministic values, so concurrent readers are safe.
    """

    def __init__(
        self,
        stats: ScatterStats,
        alpha_mu: float = 1.0,
        alpha_w: float | None = None,
        prior_scale: np.ndarray | None = None,
    ):
        d = stats.d
        if alpha_mu <= 0:
            raise ValueError("alpha_mu must be positive")
        if alpha_w is None:
            alpha_w = d + 2.0
        if alpha_w <= d - 1:
            raise ValueError("alpha_w must exceed d - 1")
        if prior_scale is None:
            t = alpha_mu * (alpha_w - d - 1.0) / (alpha_mu + 1.0)
            prior_scale = t * np.eye(d)
        prior_scale = np.asarray(prior_scale, dtype=float)
        _logdet_psd(prior_scale)  # positive definiteness check

        self.stats = stats
        self.alpha_mu = float(alpha_mu)
        self.alpha_w = float(alpha_w)
        self.prior_scale = prior_scale
        # posterior matrix for a zero prior mean
        n = stats.n
        shrink = n * alpha_mu / (n + alpha_mu)
        self._posterior = (
            prior_scale + stats.scatter + shrink * np.outer(stats.mean, stats.mean)
        )
        self._f_cache: dict[int, float] = {}
        self._score_cache: dict[tuple[int, int], float] = {}

    @property
    def d(self) -> int:
        return self.stats.d

    def _subset_loglik(self, mask: int) -> float:
        """log marginal likelihood of the data restricted to subset `mask`."""
        cached = self._f_cache.get(mask)
        if cached is not None:
            return cached
        idx = [i for i in range(self.d) if mask >> i & 1]
        l = len(idx)
        if l == 0:
            self._f_cache[mask] = 0.0
            return 0.0
        n = self.stats.n
        a = self.alpha_w - self.d + l
        try:
            logdet_t = _logdet_psd(self.prior_scale[np.ix_(idx, idx)])
            logdet_r = _logdet_psd(self._posterior[np.ix_(idx, idx)])
        except np.linalg.LinAlgError:
            raise ScoreError(
                f"singular scatter submatrix for variable subset {idx}"
            ) from None
        # log of the Wishart normalization ratio c(l, a) / c(l, a + n)
        log_c_ratio = (n * l / 2.0) * math.log(2.0) + sum(
            math.lgamma((a + n + 1 - j) / 2.0) - math.lgamma((a + 1 - j) / 2.0)
            for j in range(1, l + 1)
        )
        value = (
            -(l * n / 2.0) * math.log(2.0 * math.pi)
            + (l / 2.0) * math.log(self.alpha_mu / (n + self.alpha_mu))
            + log_c_ratio
            + (a / 2.0) * logdet_t
            - ((a + n) / 2.0) * logdet_r
        )
        if not math.isfinite(value):
            raise ScoreError(f"non-finite score for variable subset {idx}")
        self._f_cache[mask] = value
        return value

    def score_parent_mask(self, child: int, parents_mask: int) -> float:
        """Log local score of `child` given the parent set encoded as a bitmask."""
        if parents_mask >> child & 1:
            raise ValueError("child cannot be its own parent")
        key = (child, parents_mask)
        cached = self._score_cache.get(key)
        if cached is not None:
            return cached
        value = self._subset_loglik(parents_mask | 1 << child) - self._subset_loglik(
            parents_mask
        )
        # uniform structural prior contributes log 1 = 0
        self._score_cache[key] = value
        return value


def local_score(scorer: LocalScorer, child: int, pattern: QueryPattern) -> float:
    """Log BGe local score for a complete pattern (no marginalized entries)."""
    if pattern.target != child:
        raise ValueError("pattern target does not match the scored child")
    if pattern.num_vars != scorer.d - 1:
        raise ValueError("pattern length must be d - 1")
    if MARGINALIZED in pattern.states:
        raise ValueError("local_score requires a complete pattern")
    mask = 0
    for v in pattern.parent_variables():
        mask |= 1 << v
    return scorer.score_parent_mask(child, mask)


def score_graph(scorer: LocalScorer, dag: Dag) -> float:
    """Sum of per-node local scores."""
    if dag.node_count != scorer.d:
        raise ValueError("graph and scorer dimension mismatch")
    total = 0.0
    for node in range(dag.node_count):
        mask = 0
        for p in dag.parents_of(node):
            mask |= 1 << p
        total += scorer.score_parent_mask(node, mask)
    return total


def dump_score_csv(scorer: LocalScorer, path: str) -> None:
    """Debug dump of the cached (child, parent bitstring) -> score map."""
    lines = ["child,parents,score"]
    for (child, mask), value in sorted(scorer._score_cache.items()):
        bits = "".join(
            "1" if mask >> v & 1 else "0" for v in range(scorer.d) if v != child
        )
        lines.append(f"{child},{bits},{value:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
