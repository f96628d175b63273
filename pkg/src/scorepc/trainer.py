"""Two-phase regression training of one circuit per target node.

Phase 1 fits complete parent-set scores with log-domain MSE and a
plateau learning-rate schedule.  Phase 2 finetunes on a curriculum of
marginal/zero queries labeled by the exact DP table over the teacher's
candidate set, mixed evenly with freshly resampled complete sets, while
the number of marginalized variables increases one per iteration.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bge import LocalScorer
from .circuit import (
    Circuit,
    CircuitConfig,
    apply_update,
    backward_from_trace,
    build_circuit,
    evaluate_batch,
    forward_trace,
)
from .dp import CandidateSet, DpTable, build_table, select_candidates
from .patterns import MARGINALIZED, ONE, ZERO, position_of, variable_at

LABEL_SCORER = 0
LABEL_DP_TEACHER = 1

_LR_FLOOR = 1e-5
_IMPROVEMENT_THRESHOLD = 1e-3


class TrainingError(Exception):
    """Raised when a loss turns non-finite during optimization."""


@dataclass(frozen=True)
class PhaseOneConfig:
    train_size: int = 2000
    val_size: int = 500
    batch_size: int = 500
    lr: float = 1e-1
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    max_epochs: int = 80


@dataclass(frozen=True)
class PhaseTwoConfig:
    total_train: int = 4000  # merged size per curriculum iteration
    total_val: int = 800
    batch_size: int = 500
    lr: float = 5e-3
    marginal_limit: int = 4  # curriculum iterations L
    epochs_per_iter: int = 20


@dataclass(frozen=True)
class TrainConfig:
    latent: int = 64
    init_multiplier: float = -10.0
    phase1: PhaseOneConfig = field(default_factory=PhaseOneConfig)
    phase2: PhaseTwoConfig = field(default_factory=PhaseTwoConfig)
    candidate_size: int = 8
    seed: int = 0
    optimizer: str = "gd"  # "gd" (default) or "adam"
    # >1 probes several random initializations (leaf permutations differ) for
    # restart_probe_epochs of phase 1 each and keeps the best by validation
    init_restarts: int = 1
    restart_probe_epochs: int = 100

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        kwargs = dict(obj)
        if "phase1" in kwargs:
            kwargs["phase1"] = PhaseOneConfig(**kwargs["phase1"])
        if "phase2" in kwargs:
            kwargs["phase2"] = PhaseTwoConfig(**kwargs["phase2"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def default_train_config(d: int) -> TrainConfig:
    """Per-dimension defaults; 16 and 20 use the full-scale settings."""
    if d == 16:
        return TrainConfig(
            latent=256,
            phase1=PhaseOneConfig(10000, 1000, 500, 1e-1, 0.5, 5, 200),
            phase2=PhaseTwoConfig(20000, 2000, 500, 5e-3, 7, 20),
            candidate_size=15,
        )
    if d == 20:
        return TrainConfig(
            latent=64,
            phase1=PhaseOneConfig(20000, 2000, 1000, 1e-1, 0.5, 5, 200),
            phase2=PhaseTwoConfig(40000, 4000, 1000, 5e-3, 7, 20),
            candidate_size=10,
        )
    return TrainConfig(candidate_size=min(d - 1, 10))


@dataclass
class LabeledSet:
    """Patterns with log-mass labels and their provenance."""

    states: np.ndarray  # (n, M) int8
    labels: np.ndarray  # (n,)
    provenance: np.ndarray  # (n,) uint8

    def __post_init__(self):
        if not (len(self.states) == len(self.labels) == len(self.provenance)):
            raise ValueError("states, labels and provenance must align")
        scorer_rows = self.states[self.provenance == LABEL_SCORER]
        if scorer_rows.size and np.any(scorer_rows == MARGINALIZED):
            raise ValueError("scorer-labeled patterns must be complete")

    @classmethod
    def merge(cls, a: "LabeledSet", b: "LabeledSet") -> "LabeledSet":
        return cls(
            np.concatenate([a.states, b.states]),
            np.concatenate([a.labels, b.labels]),
            np.concatenate([a.provenance, b.provenance]),
        )

    def __len__(self) -> int:
        return len(self.labels)


def sample_complete(num_vars: int, count: int, seed) -> np.ndarray:
    """Complete patterns with each position One independently w.p. 1/3.

    This weights a vector with T ones proportionally to 2^(M-T), the
    number of marginal/zero masses it contributes to.
    """
    rng = np.random.default_rng(seed)
    states = np.where(rng.random((count, num_vars)) < 1.0 / 3.0, ONE, ZERO)
    return states.astype(np.int8)


def sample_marginal_queries(
    num_vars: int,
    k: int,
    count: int,
    with_one: bool,
    candidate_positions,
    seed,
) -> np.ndarray:
    """Marginal/zero (k,0) or (k,1) patterns inside the candidate positions."""
    cand = np.asarray(candidate_positions, dtype=np.int64)
    c = cand.shape[0]
    if k > c:
        raise ValueError("k exceeds the candidate set size")
    if with_one and k > c - 1:
        raise ValueError("(k,1) queries need a candidate left to set to One")
    rng = np.random.default_rng(seed)
    states = np.zeros((count, num_vars), dtype=np.int8)
    if count == 0:
        return states
    order = np.argsort(rng.random((count, c)), axis=1)
    rows = np.arange(count)[:, None]
    if k > 0:
        states[rows, cand[order[:, :k]]] = MARGINALIZED
    if with_one:
        states[np.arange(count), cand[order[:, k]]] = ONE
    return states


def _score_states(scorer, target: int, states: np.ndarray) -> np.ndarray:
    """Label complete patterns with the Bayesian scorer."""
    pos_vars = [variable_at(p, target) for p in range(states.shape[1])]
    out = np.empty(states.shape[0])
    for r in range(states.shape[0]):
        mask = 0
        for p in np.nonzero(states[r] == ONE)[0]:
            mask |= 1 << pos_vars[p]
        out[r] = scorer.score_parent_mask(target, mask)
    return out


def _dp_label_states(table: DpTable, states: np.ndarray) -> np.ndarray:
    out = np.empty(states.shape[0])
    for r in range(states.shape[0]):
        out[r] = table.query_states(states[r])
    return out


def _val_loss(circuit: Circuit, states: np.ndarray, labels: np.ndarray) -> float:
    preds = evaluate_batch(circuit, states)
    return float(np.mean((preds - labels) ** 2))


class _GdOptimizer:
    def step(self, circuit, grads, lr):
        apply_update(circuit, grads, lr)


class _AdamOptimizer:
    """Adam on the log-domain parameters; optional via TrainConfig.optimizer."""

    def __init__(self, circuit, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        params = [circuit.leaf] + circuit.sums + [circuit.root]
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, circuit, grads, lr):
        self.t += 1
        params = [circuit.leaf] + circuit.sums + [circuit.root]
        glist = [grads.leaf] + grads.sums + [grads.root]
        for p, g, m, v in zip(params, glist, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _make_optimizer(name: str, circuit: Circuit):
    if name == "gd":
        return _GdOptimizer()
    if name == "adam":
        return _AdamOptimizer(circuit)
    raise ValueError(f"unknown optimizer {name!r}")


def _train_segment(
    circuit: Circuit,
    train: LabeledSet,
    val: LabeledSet,
    batch_size: int,
    lr: float,
    max_epochs: int,
    rng: np.random.Generator,
    history: list,
    phase: int,
    iteration: int,
    plateau_factor: float | None = None,
    plateau_patience: int = 0,
    optimizer: str = "gd",
) -> None:
    """Mini-batch descent on log-domain MSE; restores the best-validation params.

    With a plateau_factor, the learning rate is multiplied by it whenever
    validation loss fails to improve by more than the threshold for
    `plateau_patience` consecutive epochs, stopping once lr underflows.
    """
    n = len(train)
    opt = _make_optimizer(optimizer, circuit)
    best_val = np.inf
    best_params = circuit.copy_parameters()
    stale = 0
    for epoch in range(1, max_epochs + 1):
        perm = rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            batch_states = train.states[idx]
            batch_labels = train.labels[idx]
            preds, trace = forward_trace(circuit, batch_states)
            residual = preds - batch_labels
            batch_loss = float(np.mean(residual**2))
            if not np.isfinite(batch_loss):
                raise TrainingError(
                    f"non-finite loss in phase {phase} epoch {epoch} "
                    f"at batch offset {start}"
                )
            grads = backward_from_trace(circuit, trace, 2.0 * residual / len(idx))
            opt.step(circuit, grads, lr)
            sq_sum += float(np.sum(residual**2))
        train_loss = sq_sum / n
        val_loss = _val_loss(circuit, val.states, val.labels)
        if not np.isfinite(val_loss):
            raise TrainingError(
                f"non-finite validation loss in phase {phase} epoch {epoch}"
            )
        history.append(
            {
                "phase": phase,
                "iteration": iteration,
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "lr": lr,
            }
        )
        if val_loss < best_val:
            if best_val - val_loss > _IMPROVEMENT_THRESHOLD:
                stale = 0
            else:
                stale += 1
            best_val = val_loss
            best_params = circuit.copy_parameters()
        else:
            stale += 1
        if plateau_factor is not None and stale >= plateau_patience:
            lr *= plateau_factor
            stale = 0
            if lr < _LR_FLOOR:
                break
    circuit.set_parameters(best_params)


@dataclass
class TrainReport:
    target: int
    history: list
    probe_mean_abs_error: float = float("nan")
    probe_count: int = 0

    def to_csv(self, path: str) -> None:
        lines = ["phase,iteration,epoch,train_loss,val_loss,lr"]
        for row in self.history:
            lines.append(
                f"{row['phase']},{row['iteration']},{row['epoch']},"
                f"{row['train_loss']:.17g},{row['val_loss']:.17g},{row['lr']:.17g}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def phase1_train(
    circuit: Circuit,
    scorer,
    target: int,
    config: PhaseOneConfig,
    seed,
    optimizer: str = "gd",
) -> list:
    """Baseline regression on weighted complete parent sets; returns history."""
    m = circuit.num_vars
    rng = np.random.default_rng([2, *_seed_key(seed)])
    train_states = sample_complete(m, config.train_size, rng.integers(2**32))
    val_states = sample_complete(m, config.val_size, rng.integers(2**32))
    train = LabeledSet(
        train_states,
        _score_states(scorer, target, train_states),
        np.full(len(train_states), LABEL_SCORER, dtype=np.uint8),
    )
    val = LabeledSet(
        val_states,
        _score_states(scorer, target, val_states),
        np.full(len(val_states), LABEL_SCORER, dtype=np.uint8),
    )
    history: list = []
    _train_segment(
        circuit,
        train,
        val,
        config.batch_size,
        config.lr,
        config.max_epochs,
        rng,
        history,
        phase=1,
        iteration=0,
        plateau_factor=config.plateau_factor,
        plateau_patience=config.plateau_patience,
        optimizer=optimizer,
    )
    return history


def phase2_train(
    circuit: Circuit,
    scorer,
    target: int,
    table: DpTable,
    config: PhaseTwoConfig,
    seed,
    optimizer: str = "gd",
) -> list:
    """Marginal curriculum: iterations k = 1..L of (k,0)/(k,1) plus resampled
    complete sets, labels from the DP teacher and the scorer respectively."""
    m = circuit.num_vars
    cand_positions = [
        position_of(v, target) for v in table.candidate_set.members
    ]
    c = len(cand_positions)
    if config.marginal_limit > c:
        raise ValueError("marginal_limit cannot exceed the candidate set size")
    history: list = []
    rng = np.random.default_rng([3, *_seed_key(seed)])
    for k in range(1, config.marginal_limit + 1):
        train = _curriculum_set(
            scorer, target, table, cand_positions, k, config.total_train, rng, m
        )
        val = _curriculum_set(
            scorer, target, table, cand_positions, k, config.total_val, rng, m
        )
        _train_segment(
            circuit,
            train,
            val,
            config.batch_size,
            config.lr,
            config.epochs_per_iter,
            rng,
            history,
            phase=2,
            iteration=k,
            optimizer=optimizer,
        )
    return history


def _curriculum_set(
    scorer, target, table, cand_positions, k, total, rng, num_vars
) -> LabeledSet:
    n_marg = total // 2
    n_comp = total - n_marg
    with_one_ok = k <= len(cand_positions) - 1
    n_m1 = n_marg // 2 if with_one_ok else 0
    n_m0 = n_marg - n_m1
    parts = [
        sample_marginal_queries(
            num_vars, k, n_m0, False, cand_positions, rng.integers(2**32)
        )
    ]
    if n_m1:
        parts.append(
            sample_marginal_queries(
                num_vars, k, n_m1, True, cand_positions, rng.integers(2**32)
            )
        )
    marg_states = np.concatenate(parts)
    comp_states = sample_complete(num_vars, n_comp, rng.integers(2**32))
    marg = LabeledSet(
        marg_states,
        _dp_label_states(table, marg_states),
        np.full(len(marg_states), LABEL_DP_TEACHER, dtype=np.uint8),
    )
    comp = LabeledSet(
        comp_states,
        _score_states(scorer, target, comp_states),
        np.full(len(comp_states), LABEL_SCORER, dtype=np.uint8),
    )
    return LabeledSet.merge(marg, comp)


def _seed_key(seed) -> list:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def learn_node_circuit(
    scorer: LocalScorer,
    target: int,
    config: TrainConfig,
) -> tuple[Circuit, TrainReport]:
    """Full per-node pipeline: build, phase 1, DP teacher, phase 2, probe.

    With init_restarts > 1, several fresh initializations (each drawing its
    own leaf permutation) run a short phase-1 probe and the best one by
    validation loss continues; the leaf permutation decides which variables
    share subtrees, and some pairings fit a given node's score surface far
    better than others.
    """
    d = scorer.d
    m = d - 1
    node_seed = [config.seed, target]

    def fresh_circuit(salt: int) -> Circuit:
        circuit_seed = int(
            np.random.SeedSequence(node_seed + [salt]).generate_state(
                1, dtype=np.uint32
            )[0]
        )
        return build_circuit(
            CircuitConfig(m, config.latent, circuit_seed, config.init_multiplier)
        )

    history: list = []
    if config.init_restarts > 1:
        best = None
        probe_config = replace(config.phase1, max_epochs=config.restart_probe_epochs)
        for restart in range(config.init_restarts):
            candidate = fresh_circuit(restart)
            probe_history = phase1_train(
                candidate, scorer, target, probe_config, node_seed, config.optimizer
            )
            val = min(row["val_loss"] for row in probe_history)
            if best is None or val < best[0]:
                best = (val, candidate, probe_history)
        circuit = best[1]
        history += best[2]
    else:
        circuit = fresh_circuit(0)
    history += phase1_train(
        circuit, scorer, target, config.phase1, node_seed, config.optimizer
    )

    candidates = select_candidates(scorer, target, config.candidate_size)
    table = build_table(scorer, candidates)
    history += phase2_train(
        circuit, scorer, target, table, config.phase2, node_seed, config.optimizer
    )

    report = TrainReport(target, history)
    _probe_report(circuit, table, report, np.random.default_rng([4, *node_seed]))
    return circuit, report


def _probe_report(circuit, table, report, rng, count: int = 200) -> None:
    """Mean absolute log-error on random marginal/zero queries vs the teacher."""
    m = circuit.num_vars
    cand_positions = np.array(
        [position_of(v, table.candidate_set.target) for v in table.candidate_set.members]
    )
    states = np.zeros((count, m), dtype=np.int8)
    marg = rng.random((count, len(cand_positions))) < 0.5
    for r in range(count):
        states[r, cand_positions[marg[r]]] = MARGINALIZED
    preds = evaluate_batch(circuit, states)
    truth = _dp_label_states(table, states)
    report.probe_mean_abs_error = float(np.mean(np.abs(preds - truth)))
    report.probe_count = count
