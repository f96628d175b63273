"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -s tests/test_acceptance.py` to see the lines as they
complete. The heavy end-to-end criteria are marked `slow`. The full-scale
d=16 replication is skipped unless SCOREPC_FULL_SCALE=1 is set.
"""

import itertools
import math
import os
import time
from collections import defaultdict

import numpy as np
import pytest
from scipy.stats import chi2, spearmanr

from scorepc.bge import LocalScorer, compute_stats, score_graph
from scorepc.circuit import (
    CircuitConfig,
    backward,
    build_circuit,
    evaluate,
    evaluate_batch,
)
from scorepc.cli import ExperimentConfig, McmcConfig, evaluate_backend
from scorepc.dp import CandidateSet, build_table
from scorepc.patterns import MARGINALIZED, ONE, ZERO
from scorepc.synthesis import (
    Dag,
    generate_er_dag,
    generate_mechanisms,
    sample_data,
)
from scorepc.trainer import (
    PhaseOneConfig,
    PhaseTwoConfig,
    TrainConfig,
    learn_node_circuit,
    sample_complete,
)


def _report(name: str):
    """Context manager printing one PASS/FAIL line per criterion."""

    class _Reporter:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            print(f"\nACCEPTANCE {status}: {name}", flush=True)
            return False

    return _Reporter()


def _make_instance(d, seed, n=100):
    dag = generate_er_dag(d, 2.0, seed=seed)
    bn = generate_mechanisms(dag, seed=seed + 1)
    data = sample_data(bn, n, seed=seed + 2)
    return dag, LocalScorer(compute_stats(data))


def test_dp_oracle_equivalence():
    """All 3^10 DP entries match brute-force log-sum-exp within 1e-9, <30 s."""
    with _report("DP oracle equivalence (M_c=10, 3^10 entries, 1e-9, <30s)"):
        t0 = time.perf_counter()
        _, scorer = _make_instance(11, seed=70)
        target = 0
        members = tuple(v for v in range(11) if v != target)
        table = build_table(scorer, CandidateSet(target, members))
        m = 10
        # brute force: base scores for all 2^10 assignments, then per ternary
        # index a log-sum-exp over the completions of its marginalized digits
        base = np.empty(2**m)
        for bits in range(2**m):
            mask = 0
            for i in range(m):
                if bits >> i & 1:
                    mask |= 1 << members[i]
            base[bits] = scorer.score_parent_mask(target, mask)
        pow3 = 3 ** np.arange(m, dtype=np.int64)
        worst = 0.0
        for marg_bits in range(2**m):
            marg = [i for i in range(m) if marg_bits >> i & 1]
            free = [i for i in range(m) if not (marg_bits >> i & 1)]
            # completions of the marginalized digits, as binary-base offsets
            subs = np.zeros(1, dtype=np.int64)
            for i in marg:
                subs = np.concatenate([subs, subs + (1 << i)])
            ones = np.zeros(1, dtype=np.int64)
            tern = np.array([sum(2 * pow3[i] for i in marg)], dtype=np.int64)
            for i in free:
                ones = np.concatenate([ones, ones + (1 << i)])
                tern = np.concatenate([tern, tern + pow3[i]])
            expected = np.logaddexp.reduce(base[ones[:, None] | subs[None, :]], axis=1)
            diff = np.max(np.abs(table.masses[tern] - expected))
            worst = max(worst, float(diff))
        elapsed = time.perf_counter() - t0
        assert worst < 1e-9, f"worst deviation {worst}"
        assert elapsed < 30.0, f"took {elapsed:.1f}s"
        print(f"  worst |dp - brute| = {worst:.2e}, {elapsed:.1f}s")


def test_circuit_marginalization_exactness():
    """All 3^8 queries on a random M=8, N=4 circuit match enumeration, <10 s."""
    with _report("circuit marginalization exactness (M=8, 3^8 patterns, 1e-8, <10s)"):
        t0 = time.perf_counter()
        circuit = build_circuit(CircuitConfig(8, 4, seed=77))
        m = 8
        complete = np.array(list(itertools.product([0, 1], repeat=m)), dtype=np.int8)
        complete_vals = evaluate_batch(circuit, complete)
        codes = complete @ (1 << np.arange(m))
        base = np.empty(2**m)
        base[codes] = complete_vals
        patterns = np.array(
            list(itertools.product([ZERO, ONE, MARGINALIZED], repeat=m)), dtype=np.int8
        )
        got = evaluate_batch(circuit, patterns)
        worst = 0.0
        for row, value in zip(patterns, got):
            ones = int(sum(1 << i for i in range(m) if row[i] == ONE))
            subs = np.zeros(1, dtype=np.int64)
            for i in np.nonzero(row == MARGINALIZED)[0]:
                subs = np.concatenate([subs, subs + (1 << int(i))])
            expected = np.logaddexp.reduce(base[ones | subs])
            worst = max(worst, abs(float(value) - float(expected)))
        elapsed = time.perf_counter() - t0
        assert worst < 1e-8, f"worst deviation {worst}"
        assert elapsed < 10.0, f"took {elapsed:.1f}s"
        print(f"  worst |circuit - enumeration| = {worst:.2e}, {elapsed:.1f}s")


def test_gradient_correctness():
    """Analytic backward matches central differences, rel err < 1e-4."""
    with _report("gradient correctness (M=4, N=3, 20 patterns, rel err < 1e-4)"):
        circuit = build_circuit(CircuitConfig(4, 3, seed=5))
        rng = np.random.default_rng(42)
        h = 1e-4
        arrays = [circuit.leaf] + circuit.sums + [circuit.root]
        for _ in range(20):
            states = rng.integers(0, 3, size=4).astype(np.int8)
            grads = backward(circuit, states)
            grad_arrays = [grads.leaf] + grads.sums + [grads.root]
            for arr, garr in zip(arrays, grad_arrays):
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    orig = arr[idx]
                    arr[idx] = orig + h
                    up = evaluate(circuit, states)
                    arr[idx] = orig - h
                    down = evaluate(circuit, states)
                    arr[idx] = orig
                    fd = (up - down) / (2 * h)
                    analytic = garr[idx]
                    if max(abs(analytic), abs(fd)) < 1e-5:
                        # below the difference quotient's own noise floor
                        # (~1e-10/h); bound absolutely there instead
                        assert abs(analytic - fd) < 1e-9
                        continue
                    rel = abs(analytic - fd) / max(abs(analytic), abs(fd))
                    assert rel < 1e-4, f"param {idx}: rel err {rel}"


def test_bge_score_equivalence():
    """Markov-equivalent DAGs on d=3 agree in total score within 1e-9."""
    with _report("BGe score equivalence (25 DAGs, within-class spread < 1e-9)"):
        _, scorer = _make_instance(3, seed=90)
        pairs = [(i, j) for i in range(3) for j in range(3) if i != j]
        dags = []
        for mask in range(2 ** len(pairs)):
            edges = frozenset(p for k, p in enumerate(pairs) if mask >> k & 1)
            if any((b, a) in edges for a, b in edges):
                continue
            try:
                dags.append(Dag(3, edges))
            except ValueError:
                continue
        assert len(dags) == 25
        classes = defaultdict(list)
        for dag in dags:
            skeleton = frozenset((min(a, b), max(a, b)) for a, b in dag.edges)
            v_structs = frozenset(
                (min(a, b), c, max(a, b))
                for c in range(3)
                for a, b in itertools.combinations(dag.parents_of(c), 2)
                if (min(a, b), max(a, b)) not in skeleton
            )
            classes[(skeleton, v_structs)].append(score_graph(scorer, dag))
        assert len(classes) == 11
        spread = max(max(v) - min(v) for v in classes.values())
        assert spread < 1e-9, f"max spread {spread}"
        print(f"  max within-class spread = {spread:.2e}")


def test_sampler_law():
    """Complete-pattern sampler matches the 2^(M-T)/3^M law at the 1% level."""
    with _report("sampler law (M=6, 200k draws, chi-square at 1%)"):
        m, draws = 6, 200_000
        states = sample_complete(m, draws, seed=1234)
        codes = states @ (1 << np.arange(m))
        observed = np.bincount(codes, minlength=2**m)
        t_of = np.array([bin(v).count("1") for v in range(2**m)])
        expected = draws * 2.0 ** (m - t_of) / 3.0**m
        stat = float(np.sum((observed - expected) ** 2 / expected))
        threshold = float(chi2.ppf(0.99, 2**m - 1))
        assert stat < threshold, f"chi-square {stat:.1f} >= {threshold:.1f}"
        print(f"  chi-square {stat:.1f} < {threshold:.1f}")


@pytest.mark.slow
def test_training_efficacy():
    """Scaled two-phase pipeline at d=8: circuit vs exact DP, Spearman >= 0.95
    per node on 200 random marginal/zero queries, inside 15 minutes."""
    with _report("training efficacy (d=8, Spearman >= 0.95 per node, <15 min)"):
        t0 = time.perf_counter()
        d = 8
        dag = generate_er_dag(d, 2.0, seed=42)
        bn = generate_mechanisms(dag, seed=43)
        data = sample_data(bn, 100, seed=44)
        scorer = LocalScorer(compute_stats(data))
        config = TrainConfig(
            latent=64,
            init_multiplier=20.0,
            optimizer="adam",
            phase1=PhaseOneConfig(2000, 500, 250, 0.2, 0.5, 60, 900),
            phase2=PhaseTwoConfig(4000, 800, 500, 0.02, 4, 20),
            candidate_size=7,
            seed=7,
        )
        rng = np.random.default_rng(123)
        rhos, maes = [], []
        for node in range(d):
            circuit, _ = learn_node_circuit(scorer, node, config)
            table = build_table(
                scorer, CandidateSet(node, tuple(v for v in range(d) if v != node))
            )
            states = np.where(
                rng.random((200, d - 1)) < 0.5, MARGINALIZED, ZERO
            ).astype(np.int8)
            truth = np.array([table.query_states(s) for s in states])
            preds = evaluate_batch(circuit, states)
            rho = float(spearmanr(preds, truth).statistic)
            mae = float(np.mean(np.abs(preds - truth)))
            rhos.append(rho)
            maes.append(mae)
            print(f"  node {node}: spearman={rho:.4f} mae={mae:.3f}", flush=True)
        elapsed = time.perf_counter() - t0
        print(
            f"  min spearman = {min(rhos):.4f}, "
            f"mean abs log-error = {np.mean(maes):.3f}, {elapsed:.0f}s"
        )
        assert min(rhos) >= 0.95, f"min Spearman {min(rhos):.4f}"
        assert elapsed < 900.0, f"took {elapsed:.0f}s"


def _d10_config():
    return ExperimentConfig(
        d=10,
        avg_edges=2.0,
        n_train=100,
        n_test=1000,
        seeds=(1,),
        backends=("dp_full", "pc"),
        train=TrainConfig(
            latent=64,
            init_multiplier=20.0,
            optimizer="adam",
            init_restarts=3,
            restart_probe_epochs=100,
            phase1=PhaseOneConfig(2000, 400, 250, 0.2, 0.5, 60, 400),
            phase2=PhaseTwoConfig(3000, 600, 500, 0.05, 7, 15),
            candidate_size=9,
            seed=17,
        ),
        mcmc=McmcConfig(iterations=4000, burn_in=1000, thin=15, seed=5),
        out_dir="",
    )


@pytest.mark.slow
def test_downstream_interchangeability(tmp_path):
    """PC and unrestricted-DP backends on identical d=10 data and MCMC seeds:
    AUROC within 0.05 and MLL within 2% relative."""
    with _report("downstream interchangeability (d=10, AUROC/MLL bars)"):
        from dataclasses import replace

        cfg = replace(_d10_config(), out_dir=str(tmp_path))
        row_dp = evaluate_backend(cfg, "dp_full", 1)
        row_pc = evaluate_backend(cfg, "pc", 1)
        print(
            f"  dp_full: auroc={row_dp['auroc']:.4f} mll={row_dp['mll']:.1f} "
            f"e_shd={row_dp['e_shd']:.2f} edges={row_dp['mean_edges']:.1f}"
        )
        print(
            f"  pc:      auroc={row_pc['auroc']:.4f} mll={row_pc['mll']:.1f} "
            f"e_shd={row_pc['e_shd']:.2f} edges={row_pc['mean_edges']:.1f}"
        )
        assert row_pc["auroc"] >= row_dp["auroc"] - 0.05, (
            f"AUROC {row_pc['auroc']:.4f} vs {row_dp['auroc']:.4f}"
        )
        rel = abs(row_pc["mll"] - row_dp["mll"]) / abs(row_dp["mll"])
        assert rel <= 0.02, f"MLL relative difference {rel:.4f}"


@pytest.mark.slow
def test_restricted_dp_degradation(tmp_path):
    """d=12, five seeds: both the unrestricted DP and the PC beat the
    candidate-restricted DP on AUROC on at least 3 of 5 seeds."""
    with _report("restricted-DP degradation (d=12, 5 seeds, AUROC ordering)"):
        from dataclasses import replace

        cfg = ExperimentConfig(
            d=12,
            avg_edges=2.0,
            n_train=100,
            n_test=1000,
            seeds=(1, 2, 3, 4, 5),
            backends=("dp_full", "dp_restricted:6", "pc"),
            train=TrainConfig(
                latent=64,
                init_multiplier=20.0,
                optimizer="adam",
                init_restarts=3,
                restart_probe_epochs=80,
                phase1=PhaseOneConfig(2000, 400, 250, 0.2, 0.5, 60, 320),
                phase2=PhaseTwoConfig(3000, 600, 500, 0.05, 7, 12),
                candidate_size=11,
                seed=23,
            ),
            mcmc=McmcConfig(iterations=4000, burn_in=1000, thin=15, seed=9),
            out_dir=str(tmp_path),
        )
        full_wins, pc_wins = 0, 0
        for seed in cfg.seeds:
            row_full = evaluate_backend(cfg, "dp_full", seed)
            row_restr = evaluate_backend(cfg, "dp_restricted:6", seed)
            row_pc = evaluate_backend(cfg, "pc", seed)
            full_wins += row_full["auroc"] >= row_restr["auroc"]
            pc_wins += row_pc["auroc"] >= row_restr["auroc"]
            print(
                f"  seed {seed}: full={row_full['auroc']:.4f} "
                f"restricted={row_restr['auroc']:.4f} pc={row_pc['auroc']:.4f}",
                flush=True,
            )
        print(f"  full wins {full_wins}/5, pc wins {pc_wins}/5")
        assert full_wins >= 3, f"unrestricted DP won only {full_wins}/5"
        assert pc_wins >= 3, f"PC won only {pc_wins}/5"


@pytest.mark.slow
@pytest.mark.skipif(
    os.environ.get("SCOREPC_FULL_SCALE") != "1",
    reason="multi-hour full-scale replication; set SCOREPC_FULL_SCALE=1",
)
def test_full_scale_qualitative(tmp_path):
    """Full-scale qualitative replication at d=16 with the published-scale
    hyperparameters (N=256, batch 500, L=7). Multi-hour budget."""
    with _report("full-scale qualitative replication (d=16)"):
        from dataclasses import replace

        from scorepc.trainer import default_train_config

        cfg = ExperimentConfig(
            d=16,
            avg_edges=2.0,
            n_train=100,
            n_test=1000,
            seeds=(1,),
            backends=("dp_full", "pc"),
            train=replace(default_train_config(16), optimizer="adam", seed=31),
            mcmc=McmcConfig(iterations=6000, burn_in=2000, thin=20, seed=13),
            out_dir=str(tmp_path),
        )
        row_dp = evaluate_backend(cfg, "dp_full", 1)
        row_pc = evaluate_backend(cfg, "pc", 1)
        print(f"  dp_full: {row_dp}")
        print(f"  pc:      {row_pc}")
        assert row_pc["auroc"] >= row_dp["auroc"] - 0.1
