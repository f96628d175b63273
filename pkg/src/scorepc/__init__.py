"""Tractable circuit marginalizers for Bayesian-network local scores."""

from .bge import LocalScorer, ScatterStats, ScoreError, compute_stats, local_score, score_graph
from .circuit import (
    Circuit,
    CircuitConfig,
    StructureError,
    audit_structure,
    backward,
    build_circuit,
    evaluate,
    evaluate_batch,
    load_circuit,
    normalizing_constant,
    save_circuit,
)
from .dp import (
    CandidateSet,
    DpTable,
    RestrictionError,
    build_table,
    dp_query,
    select_candidates,
)
from .patterns import MARGINALIZED, ONE, ZERO, QueryPattern
from .posterior import (
    BackendError,
    CircuitBackend,
    Cpdag,
    DpBackend,
    Ordering,
    dag_to_cpdag,
    edge_auroc,
    expected_shd,
    mll,
    order_mcmc,
    sample_dag,
    sample_parents,
    score_ordering,
)
from .synthesis import (
    Dag,
    DataMatrix,
    GroundTruthBn,
    generate_er_dag,
    generate_mechanisms,
    sample_data,
)
from .trainer import (
    LabeledSet,
    PhaseOneConfig,
    PhaseTwoConfig,
    TrainConfig,
    TrainingError,
    default_train_config,
    learn_node_circuit,
    phase1_train,
    phase2_train,
    sample_complete,
    sample_marginal_queries,
)

__version__ = "0.1.0"
