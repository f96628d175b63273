"""Command-line entry point wiring the library into reproducible experiments.

Subcommands: generate, train, build-dp, query, eval, report.  Every
command is deterministic given its config file (seeds included); all
output files are written atomically (write to a temp file, then rename).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .bge import LocalScorer, compute_stats
from .circuit import evaluate_batch, load_circuit, save_circuit
from .dp import CandidateSet, DpTable, build_table, select_candidates
from .patterns import QueryPattern
from .posterior import (
    CircuitBackend,
    DpBackend,
    edge_auroc,
    edge_marginals,
    expected_shd,
    mll,
    order_mcmc,
    sample_dag,
)
from .synthesis import DataMatrix, generate_er_dag, generate_mechanisms, sample_data
from .trainer import TrainConfig, learn_node_circuit

METRICS_HEADER = ["method", "d", "seed", "e_shd", "auroc", "mll", "mean_edges"]


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 4000
    burn_in: int = 1000
    thin: int = 15
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    d: int
    avg_edges: float = 2.0
    n_train: int = 100
    n_test: int = 1000
    seeds: tuple[int, ...] = (0,)
    backends: tuple[str, ...] = ("dp_full", "pc")
    train: TrainConfig = field(default_factory=TrainConfig)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    out_dir: str = "runs/experiment"

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            obj = json.load(fh)
        if "train" in obj:
            obj["train"] = TrainConfig.from_dict(obj["train"])
        if "mcmc" in obj:
            obj["mcmc"] = McmcConfig(**obj["mcmc"])
        obj["seeds"] = tuple(obj.get("seeds", (0,)))
        obj["backends"] = tuple(obj.get("backends", ("dp_full", "pc")))
        return cls(**obj)


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint32)[0])


def _write_atomic(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _digest(path: str) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def _seed_dir(cfg: ExperimentConfig, seed: int) -> str:
    return os.path.join(cfg.out_dir, f"seed_{seed}")


def _make_truth(cfg: ExperimentConfig, seed: int):
    dag = generate_er_dag(cfg.d, cfg.avg_edges, _derived_seed(seed, 0))
    bn = generate_mechanisms(dag, _derived_seed(seed, 1))
    train_data = sample_data(bn, cfg.n_train, _derived_seed(seed, 2))
    test_data = sample_data(bn, cfg.n_test, _derived_seed(seed, 3))
    return dag, bn, train_data, test_data


def run_generate(cfg: ExperimentConfig) -> dict[str, str]:
    """Write truth DAG, mechanisms and data per seed; return file digests."""
    digests = {}
    for seed in cfg.seeds:
        base = _seed_dir(cfg, seed)
        os.makedirs(base, exist_ok=True)
        dag, bn, train_data, test_data = _make_truth(cfg, seed)
        _write_atomic(os.path.join(base, "truth_dag.json"), dag.to_json().encode())
        _write_atomic(os.path.join(base, "mechanisms.json"), bn.to_json().encode())
        for name, data in [("train.csv", train_data), ("test.csv", test_data)]:
            tmp_path = os.path.join(base, name)
            rows = "\n".join(
                ",".join(f"{v:.17g}" for v in row) for row in data.values
            )
            _write_atomic(tmp_path, (rows + "\n").encode())
        for name in ["truth_dag.json", "mechanisms.json", "train.csv", "test.csv"]:
            digests[f"seed_{seed}/{name}"] = _digest(os.path.join(base, name))
    return digests


def _train_scorer(cfg: ExperimentConfig, seed: int) -> LocalScorer:
    path = os.path.join(_seed_dir(cfg, seed), "train.csv")
    if os.path.exists(path):
        data = DataMatrix.from_csv(path)
    else:
        data = _make_truth(cfg, seed)[2]
    return LocalScorer(compute_stats(data))


def run_train(cfg: ExperimentConfig) -> list[str]:
    """Train one circuit per node per seed; write circuits and report CSVs."""
    written = []
    for seed in cfg.seeds:
        base = _seed_dir(cfg, seed)
        os.makedirs(base, exist_ok=True)
        scorer = _train_scorer(cfg, seed)
        node_config = replace(cfg.train, seed=_derived_seed(cfg.train.seed, seed))
        for node in range(cfg.d):
            circuit, report = learn_node_circuit(scorer, node, node_config)
            circuit_path = os.path.join(base, f"node_{node}.circuit")
            save_circuit(circuit, circuit_path)
            report.to_csv(os.path.join(base, f"report_node_{node}.csv"))
            written.append(circuit_path)
    return written


def _backend_candidates(spec: str, scorer: LocalScorer, node: int) -> CandidateSet:
    d = scorer.d
    if spec == "dp_full":
        return CandidateSet(node, tuple(v for v in range(d) if v != node))
    size = int(spec.split(":", 1)[1])
    return select_candidates(scorer, node, size)


def run_build_dp(cfg: ExperimentConfig, backend: str) -> list[str]:
    """Build and dump DP tables for a dp_full / dp_restricted:<k> backend."""
    written = []
    for seed in cfg.seeds:
        base = _seed_dir(cfg, seed)
        os.makedirs(base, exist_ok=True)
        scorer = _train_scorer(cfg, seed)
        for node in range(cfg.d):
            table = build_table(scorer, _backend_candidates(backend, scorer, node))
            prefix = os.path.join(base, f"{backend.replace(':', '_')}_node_{node}.dp")
            table.save(prefix)
            written.append(prefix)
    return written


def _build_backends(cfg: ExperimentConfig, backend: str, seed: int, scorer: LocalScorer):
    base = _seed_dir(cfg, seed)
    if backend == "pc":
        backends = []
        node_config = replace(cfg.train, seed=_derived_seed(cfg.train.seed, seed))
        for node in range(cfg.d):
            path = os.path.join(base, f"node_{node}.circuit")
            if os.path.exists(path):
                circuit = load_circuit(path)
            else:
                circuit, _ = learn_node_circuit(scorer, node, node_config)
                save_circuit(circuit, path)
            backends.append(CircuitBackend(node, circuit))
        return backends
    if backend == "dp_full" or backend.startswith("dp_restricted:"):
        return [
            DpBackend(build_table(scorer, _backend_candidates(backend, scorer, node)))
            for node in range(cfg.d)
        ]
    raise ValueError(f"unknown backend {backend!r}")


def evaluate_backend(
    cfg: ExperimentConfig, backend: str, seed: int
) -> dict:
    """One metrics row: run the MCMC harness for a backend on one seed."""
    dag, _, train_data, test_data = _make_truth(cfg, seed)
    scorer = LocalScorer(compute_stats(train_data))
    backends = _build_backends(cfg, backend, seed, scorer)
    mcmc_seed = _derived_seed(cfg.mcmc.seed, seed)
    orderings = order_mcmc(
        backends, cfg.mcmc.iterations, cfg.mcmc.burn_in, cfg.mcmc.thin, mcmc_seed
    )
    dag_rng = np.random.default_rng([mcmc_seed, 1])
    samples = [
        sample_dag(backends, sigma, int(dag_rng.integers(2**32)))
        for sigma in orderings
    ]
    test_scorer = LocalScorer(compute_stats(test_data))
    return {
        "method": backend,
        "d": cfg.d,
        "seed": seed,
        "e_shd": expected_shd(samples, dag),
        "auroc": edge_auroc(samples, dag),
        "mll": mll(samples, test_scorer),
        "mean_edges": float(np.mean([len(g.edges) for g in samples])),
    }


def run_eval(cfg: ExperimentConfig, only_backend: str | None = None) -> list[dict]:
    """All (backend, seed) metric rows; writes metrics.csv in the out dir."""
    rows = []
    backends = [only_backend] if only_backend else list(cfg.backends)
    for seed in cfg.seeds:
        for backend in backends:
            rows.append(evaluate_backend(cfg, backend, seed))
    lines = [",".join(METRICS_HEADER)]
    for row in rows:
        lines.append(
            ",".join(
                f"{row[k]:.17g}" if isinstance(row[k], float) else str(row[k])
                for k in METRICS_HEADER
            )
        )
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_atomic(
        os.path.join(cfg.out_dir, "metrics.csv"), ("\n".join(lines) + "\n").encode()
    )
    return rows


def run_report(out_dir: str) -> list[dict]:
    """Aggregate metrics.csv per method into mean/std figure data."""
    path = os.path.join(out_dir, "metrics.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    methods = sorted({r["method"] for r in rows})
    summary = []
    for method in methods:
        sub = [r for r in rows if r["method"] == method]
        entry = {"method": method, "runs": len(sub)}
        for key in ["e_shd", "auroc", "mll", "mean_edges"]:
            vals = np.array([float(r[key]) for r in sub])
            entry[f"{key}_mean"] = float(vals.mean())
            entry[f"{key}_std"] = float(vals.std())
        summary.append(entry)
    header = list(summary[0].keys())
    lines = [",".join(header)]
    for entry in summary:
        lines.append(
            ",".join(
                f"{entry[k]:.17g}" if isinstance(entry[k], float) else str(entry[k])
                for k in header
            )
        )
    _write_atomic(
        os.path.join(out_dir, "summary.csv"), ("\n".join(lines) + "\n").encode()
    )
    return summary


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="scorepc",
        description="Bayesian-score circuits: data synthesis, training, "
        "queries and posterior evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ["generate", "train", "eval"]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if name == "eval":
            p.add_argument("--backend", default=None)

    p = sub.add_parser("build-dp")
    p.add_argument("--config", required=True)
    p.add_argument("--backend", default="dp_full")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("query")
    p.add_argument("--circuit", required=True)
    p.add_argument("--pattern", required=True)

    p = sub.add_parser("report")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            digests = run_generate(_load_config(args))
            for name, digest in sorted(digests.items()):
                print(f"{digest}  {name}")
        elif args.command == "train":
            for path in run_train(_load_config(args)):
                print(path)
        elif args.command == "build-dp":
            for path in run_build_dp(_load_config(args), args.backend):
                print(path)
        elif args.command == "query":
            circuit = load_circuit(args.circuit)
            try:
                states = QueryPattern.from_string(args.pattern, target=0).as_array()
            except ValueError as exc:
                print(f"usage error: {exc}", file=sys.stderr)
                return 2
            if states.shape[0] != circuit.num_vars:
                print(
                    f"usage error: pattern must have length {circuit.num_vars}",
                    file=sys.stderr,
                )
                return 2
            value = float(evaluate_batch(circuit, states[None, :])[0])
            print(f"{value:.17g}")
        elif args.command == "eval":
            rows = run_eval(_load_config(args), args.backend)
            for row in rows:
                print(
                    f"{row['method']} seed={row['seed']} e_shd={row['e_shd']:.4f} "
                    f"auroc={row['auroc']:.4f} mll={row['mll']:.4f} "
                    f"mean_edges={row['mean_edges']:.2f}"
                )
        elif args.command == "report":
            for entry in run_report(args.out):
                print(entry)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
