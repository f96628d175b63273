"""Smooth, decomposable, unnormalized probabilistic circuits.

Layout follows the layered matrix construction: a leaf grid of shape
(M, N) over the M pattern variables (padded to the next power of two),
then alternating product layers (pair consecutive rows, add log-values)
and sum layers (N x N log-domain weighted log-sum-exp per row), and a
final N -> 1 unnormalized sum at the root.

Everything is stored and computed in the log domain.  Marginalized
variables are handled at the leaves (log-sum-exp of the two leaf
parameters), which turns any marginal query into a single forward pass.

All reductions go through np.einsum with a fixed contraction order, so
results are bit-identical whether patterns are evaluated one at a time
or in a batch.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .patterns import MARGINALIZED, ONE, ZERO, QueryPattern

_LOG_HALF = math.log(0.5)
_FORWARD_CHUNK = 4096


class StructureError(Exception):
    """Raised by the scope audit when smoothness/decomposability is violated."""


@dataclass(frozen=True)
class CircuitConfig:
    num_vars: int  # pattern length M
    latent: int  # column count N
    seed: int
    init_multiplier: float = -10.0

    def __post_init__(self):
        if self.num_vars < 1:
            raise ValueError("num_vars must be >= 1")
        if self.latent < 1:
            raise ValueError("latent must be >= 1")


def _next_power_of_two(m: int) -> int:
    return 1 << (m - 1).bit_length()


@dataclass
class Circuit:
    """Parameter container; mutated in place by the trainer (single writer)."""

    config: CircuitConfig
    permutation: np.ndarray  # leaf row r holds pattern variable permutation[r]
    leaf: np.ndarray  # (padded_vars, N, 2) log-domain; pad rows fixed at log(1/2)
    sums: list[np.ndarray]  # per sum layer, (rows, N, N) log-domain
    root: np.ndarray  # (N,) log-domain

    @property
    def num_vars(self) -> int:
        return self.config.num_vars

    @property
    def padded_vars(self) -> int:
        return self.leaf.shape[0]

    @property
    def latent(self) -> int:
        return self.config.latent

    def copy_parameters(self) -> list[np.ndarray]:
        return [self.leaf.copy()] + [w.copy() for w in self.sums] + [self.root.copy()]

    def set_parameters(self, params: list[np.ndarray]) -> None:
        np.copyto(self.leaf, params[0])
        for w, p in zip(self.sums, params[1:-1]):
            np.copyto(w, p)
        np.copyto(self.root, params[-1])


@dataclass
class ParamGradients:
    leaf: np.ndarray
    sums: list[np.ndarray]
    root: np.ndarray


def build_circuit(config: CircuitConfig) -> Circuit:
    """Construct and initialize a circuit; i.i.d. init m * log(U(0,1))."""
    rng = np.random.default_rng(config.seed)
    m_vars = config.num_vars
    padded = _next_power_of_two(m_vars)
    n = config.latent
    mult = config.init_multiplier

    permutation = rng.permutation(m_vars)

    def draw(shape):
        # 1 - U is also uniform on (0, 1] and avoids log(0)
        return mult * np.log1p(-rng.random(shape))

    leaf = np.full((padded, n, 2), _LOG_HALF)
    leaf[:m_vars] = draw((m_vars, n, 2))

    sums = []
    rows = padded // 2
    while rows >= 1:
        sums.append(draw((rows, n, n)))
        rows //= 2
    root = draw((n,))
    return Circuit(config, permutation, leaf, sums, root)


def _as_states_matrix(patterns, num_vars: int) -> np.ndarray:
    if isinstance(patterns, np.ndarray) and patterns.ndim == 2:
        states = patterns.astype(np.int8, copy=False)
    else:
        rows = [
            p.as_array() if isinstance(p, QueryPattern) else np.asarray(p, dtype=np.int8)
            for p in patterns
        ]
        states = (
            np.stack(rows) if rows else np.empty((0, num_vars), dtype=np.int8)
        )
    if states.shape[1] != num_vars:
        raise ValueError(f"patterns must have length {num_vars}")
    if states.size and (states.min() < 0 or states.max() > 2):
        raise ValueError("pattern states must be 0, 1 or 2")
    return states


def _leaf_stack(circuit: Circuit) -> np.ndarray:
    """(rows, 3, N): leaf log-values for states zero, one, marginalized."""
    theta0 = circuit.leaf[:, :, 0]
    theta1 = circuit.leaf[:, :, 1]
    return np.stack([theta0, theta1, np.logaddexp(theta0, theta1)], axis=1)


def _extend_states(circuit: Circuit, states: np.ndarray) -> np.ndarray:
    """Route pattern states to leaf rows; pad rows are always marginalized."""
    b = states.shape[0]
    ext = np.full((b, circuit.padded_vars), MARGINALIZED, dtype=np.int8)
    ext[:, : circuit.num_vars] = states[:, circuit.permutation]
    return ext


def _safe(shift: np.ndarray) -> np.ndarray:
    return np.where(np.isfinite(shift), shift, 0.0)


def _sum_layer_forward(prod: np.ndarray, w: np.ndarray, use_blas: bool):
    """out[b,i,j] = logsumexp_k(w[i,j,k] + prod[b,i,k]), max-shifted.

    The einsum route reduces over k in a fixed order regardless of batch
    size (bit-identical one-at-a-time vs batched); the BLAS route is much
    faster and is used inside training, where only run-to-run determinism
    at fixed shapes matters.
    """
    rows = w.shape[0]
    n = w.shape[1]
    b = prod.shape[0]
    shift_c = prod.max(axis=2)  # (B, rows)
    shift_w = w.max(axis=2)  # (rows, N)
    ec = np.exp(prod - _safe(shift_c)[:, :, None])
    ew = np.exp(w - _safe(shift_w)[:, :, None])
    lin = np.empty((b, rows, n))
    for i in range(rows):
        if use_blas:
            np.matmul(ec[:, i], ew[i].T, out=lin[:, i])
        else:
            np.einsum("bk,jk->bj", ec[:, i], ew[i], out=lin[:, i])
    with np.errstate(divide="ignore"):
        out = np.log(lin) + _safe(shift_c)[:, :, None] + _safe(shift_w)[None, :, :]
    return out, ec, ew, lin


def _forward(circuit: Circuit, states: np.ndarray, keep_trace: bool, use_blas: bool = False):
    """Forward pass over a batch; optionally keeps per-layer workspaces."""
    ext = _extend_states(circuit, states)
    stack = _leaf_stack(circuit)
    cur = stack[np.arange(circuit.padded_vars)[None, :], ext]  # (B, rows, N)
    leaf_vals = cur
    levels = []
    for w in circuit.sums:
        prod = cur[:, 0::2] + cur[:, 1::2]
        cur, ec, ew, lin = _sum_layer_forward(prod, w, use_blas)
        if keep_trace:
            levels.append((ec, ew, lin))
    z = circuit.root[None, :] + cur[:, 0, :]
    shift = z.max(axis=1)
    ez = np.exp(z - _safe(shift)[:, None])
    lin_root = ez.sum(axis=1)
    with np.errstate(divide="ignore"):
        out = np.log(lin_root) + _safe(shift)
    if not keep_trace:
        return out, None
    trace = {
        "ext": ext,
        "stack": stack,
        "leaf_vals": leaf_vals,
        "levels": levels,
        "ez": ez,
        "lin_root": lin_root,
    }
    return out, trace


def evaluate_batch(circuit: Circuit, patterns) -> np.ndarray:
    """Log-values of the root for a sequence of patterns."""
    states = _as_states_matrix(patterns, circuit.num_vars)
    if states.shape[0] == 0:
        return np.empty(0)
    outs = []
    for start in range(0, states.shape[0], _FORWARD_CHUNK):
        out, _ = _forward(circuit, states[start : start + _FORWARD_CHUNK], False)
        outs.append(out)
    return np.concatenate(outs)


def evaluate(circuit: Circuit, pattern) -> float:
    """Log-value of the root for one pattern; marginals are exact."""
    return float(evaluate_batch(circuit, [pattern])[0])


def normalizing_constant(circuit: Circuit) -> float:
    """Log of the total mass: the all-marginalized query."""
    return evaluate(
        circuit, np.full(circuit.num_vars, MARGINALIZED, dtype=np.int8)
    )


def _zero_grads(circuit: Circuit) -> ParamGradients:
    return ParamGradients(
        np.zeros_like(circuit.leaf),
        [np.zeros_like(w) for w in circuit.sums],
        np.zeros_like(circuit.root),
    )


def _rescale(g: np.ndarray, lin: np.ndarray) -> np.ndarray:
    """g / lin with 0 where g is 0 (a -inf activation never receives gradient).

    lin is clamped away from zero; a denormal lin means the run is already
    diverging and the non-finite loss guard upstream will abort it.
    """
    return np.where(g != 0.0, g / np.maximum(lin, np.finfo(float).tiny), 0.0)


def _accumulate_backward(circuit, trace, out_grads, grads) -> None:
    ez = trace["ez"]
    lin_root = trace["lin_root"]
    with np.errstate(over="ignore", invalid="ignore"):
        u_root = _rescale(out_grads, lin_root)
        resp = u_root[:, None] * ez  # (B, N) gradient wrt (root + h)
        grads.root += resp.sum(axis=0)
        g = resp[:, None, :]  # gradient wrt last sum layer output, (B, 1, N)

        for level in range(len(circuit.sums) - 1, -1, -1):
            w = circuit.sums[level]
            ec, ew, lin = trace["levels"][level]
            rows = w.shape[0]
            u = _rescale(g, lin)
            gp = np.empty_like(ec)
            gw = np.empty_like(w)
            for i in range(rows):
                np.matmul(u[:, i].T, ec[:, i], out=gw[i])
                np.matmul(u[:, i], ew[i], out=gp[:, i])
            gw *= ew
            gp *= ec
            grads.sums[level] += gw
            g = np.repeat(gp, 2, axis=1)  # product backward: both children get gp

    # g now holds gradients w.r.t. leaf values, (B, padded, N)
    ext = trace["ext"]
    stack = trace["stack"]
    theta0 = circuit.leaf[:, :, 0]
    theta1 = circuit.leaf[:, :, 1]
    vm = stack[:, 2]
    with np.errstate(invalid="ignore"):
        r0 = np.where(np.isfinite(vm), np.exp(theta0 - np.where(np.isfinite(vm), vm, 0.0)), 0.0)
        r1 = np.where(np.isfinite(vm), np.exp(theta1 - np.where(np.isfinite(vm), vm, 0.0)), 0.0)
    w0 = (ext == ZERO).astype(float)
    w1 = (ext == ONE).astype(float)
    wm = (ext == MARGINALIZED).astype(float)
    gsel0 = np.einsum("bm,bmn->mn", w0, g)
    gsel1 = np.einsum("bm,bmn->mn", w1, g)
    gselm = np.einsum("bm,bmn->mn", wm, g)
    grads.leaf[:, :, 0] += gsel0 + r0 * gselm
    grads.leaf[:, :, 1] += gsel1 + r1 * gselm
    grads.leaf[circuit.num_vars :] = 0.0  # pad leaves are constants


def forward_trace(circuit: Circuit, patterns) -> tuple[np.ndarray, dict]:
    """Root log-values plus the per-layer workspace needed by the backward pass.

    Uses the fast BLAS contraction: values may differ from evaluate() in the
    last few ulps but are deterministic across runs for fixed shapes.
    """
    states = _as_states_matrix(patterns, circuit.num_vars)
    return _forward(circuit, states, True, use_blas=True)


def backward_from_trace(circuit: Circuit, trace: dict, out_grads) -> ParamGradients:
    """Sum over the batch of out_grads[b] times the gradient of sample b.

    Gradients are exact reverse-mode derivatives with respect to the
    log-domain parameters; pad-row leaf slots always report zero.
    """
    grads = _zero_grads(circuit)
    _accumulate_backward(circuit, trace, np.asarray(out_grads, dtype=float), grads)
    return grads


def weighted_gradients(circuit: Circuit, patterns, out_weights) -> tuple[np.ndarray, ParamGradients]:
    """Chunked convenience wrapper around forward_trace/backward_from_trace."""
    states = _as_states_matrix(patterns, circuit.num_vars)
    weights = np.asarray(out_weights, dtype=float)
    if weights.shape != (states.shape[0],):
        raise ValueError("one output weight per pattern required")
    grads = _zero_grads(circuit)
    values = []
    for start in range(0, states.shape[0], _FORWARD_CHUNK):
        chunk = states[start : start + _FORWARD_CHUNK]
        out, trace = _forward(circuit, chunk, True, use_blas=True)
        _accumulate_backward(circuit, trace, weights[start : start + _FORWARD_CHUNK], grads)
        values.append(out)
    return np.concatenate(values) if values else np.empty(0), grads


def backward(circuit: Circuit, pattern) -> ParamGradients:
    """Exact gradient of the root log-value for one pattern."""
    _, grads = weighted_gradients(circuit, [pattern], np.ones(1))
    return grads


def apply_update(circuit: Circuit, grads: ParamGradients, lr: float) -> None:
    """One gradient-descent step; pad-row leaf parameters stay fixed."""
    m = circuit.num_vars
    circuit.leaf[:m] -= lr * grads.leaf[:m]
    for w, gw in zip(circuit.sums, grads.sums):
        w -= lr * gw
    circuit.root -= lr * grads.root


def audit_structure(circuit: Circuit) -> None:
    """Recompute every node's scope and check smoothness/decomposability.

    Raises StructureError on any violation; the root must cover all
    pattern variables.
    """
    n = circuit.latent
    scopes = []
    for r in range(circuit.padded_vars):
        scope = (
            frozenset([int(circuit.permutation[r])])
            if r < circuit.num_vars
            else frozenset()
        )
        scopes.append([scope] * n)
    for w in circuit.sums:
        rows = w.shape[0]
        prod_scopes = []
        for i in range(rows):
            row = []
            for j in range(n):
                left, right = scopes[2 * i][j], scopes[2 * i + 1][j]
                if left & right:
                    raise StructureError(
                        f"product child scopes overlap at row {i}, column {j}"
                    )
                row.append(left | right)
            prod_scopes.append(row)
        sum_scopes = []
        for i in range(rows):
            distinct = set(prod_scopes[i])
            if len(distinct) != 1:
                raise StructureError(f"sum inputs at row {i} mix scopes")
            sum_scopes.append([prod_scopes[i][0]] * n)
        scopes = sum_scopes
    root_children = set(scopes[0])
    if len(root_children) != 1:
        raise StructureError("root children mix scopes")
    if scopes[0][0] != frozenset(range(circuit.num_vars)):
        raise StructureError("root scope does not cover all variables")


def save_circuit(circuit: Circuit, path: str) -> None:
    """JSON header line + little-endian float64 parameter blob; atomic write."""
    header = {
        "num_vars": circuit.config.num_vars,
        "latent": circuit.config.latent,
        "seed": circuit.config.seed,
        "init_multiplier": circuit.config.init_multiplier,
        "permutation": circuit.permutation.tolist(),
    }
    blob = b"".join(
        arr.astype("<f8").tobytes()
        for arr in [circuit.leaf] + circuit.sums + [circuit.root]
    )
    payload = json.dumps(header).encode() + b"\n" + blob
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_circuit(path: str) -> Circuit:
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode())
    config = CircuitConfig(
        header["num_vars"], header["latent"], header["seed"], header["init_multiplier"]
    )
    padded = _next_power_of_two(config.num_vars)
    n = config.latent
    blob = raw[newline + 1 :]
    offset = 0

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset * 8
        ).reshape(shape).astype(float)
        offset += count
        return arr

    leaf = take((padded, n, 2))
    sums = []
    rows = padded // 2
    while rows >= 1:
        sums.append(take((rows, n, n)))
        rows //= 2
    root = take((n,))
    return Circuit(config, np.asarray(header["permutation"]), leaf, sums, root)
