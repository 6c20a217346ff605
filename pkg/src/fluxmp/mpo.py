"""Message-passing optimizer that balances flux on a directed factor graph.

One epoch has three phases: variable->factor messages carry the current
weights outward, each factor sends every neighbour the nonnegative value that
would balance it given the other neighbours' messages, and the weight update
blends each variable toward the mean of its incoming factor messages at rate
beta.  Per-factor message totals are cached so an epoch costs O(edges).

The weight step is safeguarded: whenever a full-beta step would increase a
sample's L1 imbalance (which happens for large beta on graphs with
high-degree factors), that sample's step is halved until the epoch is
non-increasing.  The safeguard never fires on steps that already decrease the
imbalance, so small-beta behaviour and the documented single-step operations
are untouched.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .graph import DirectedFactorGraph, FluxMatrix, FluxVector

ETA_MODES = ("uniform", "imbalance_weighted")

_MAX_BACKTRACKS = 40


class MpoDivergenceError(RuntimeError):
    """Non-finite values encountered during balancing."""


@dataclass(frozen=True)
class MpoConfig:
    beta: float = 0.5
    alpha: float = 1e-6
    max_epochs: int = 10_000
    eta_mode: str = "uniform"

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.eta_mode not in ETA_MODES:
            raise ValueError(f"eta_mode must be one of {ETA_MODES}, got {self.eta_mode!r}")


@dataclass
class MpoTrace:
    l1_per_epoch: np.ndarray
    epochs_run: int
    converged: bool


@dataclass
class MessageState:
    """Directed message values on every factor<->variable edge pair."""

    msg_f2v: dict[tuple[int, int], float]
    msg_v2f: dict[tuple[int, int], float]


class _CompiledGraph:
    """Edge-indexed arrays for the vectorized kernel.

    Edges are stored factor-major; ``v_order`` re-sorts them variable-major.
    Both orders feed ``np.add.reduceat`` segment sums.
    """

    def __init__(self, g: DirectedFactorGraph):
        edges = sorted(g.edges, key=lambda e: (e.factor, e.variable, not e.is_parent))
        self.n_edges = len(edges)
        self.ef = np.array([e.factor for e in edges], dtype=np.intp)
        self.ev = np.array([e.variable for e in edges], dtype=np.intp)
        self.sign = np.array([1.0 if e.is_parent else -1.0 for e in edges])
        self.coeff = np.array([e.coefficient for e in edges])
        self.signed_coeff = self.sign * self.coeff
        self.edge_keys = [(e.factor, e.variable) for e in edges]

        counts_f = np.bincount(self.ef, minlength=g.n_factors)
        self.f_start = np.concatenate([[0], np.cumsum(counts_f)])[:-1].astype(np.intp)
        self.v_order = np.argsort(self.ev, kind="stable")
        counts_v = np.bincount(self.ev, minlength=g.n_variables)
        self.v_start = np.concatenate([[0], np.cumsum(counts_v)])[:-1].astype(np.intp)
        self.v_degree = counts_v.astype(float)

    def factor_sums(self, per_edge: np.ndarray) -> np.ndarray:
        """Sum per-edge values (m x E) into per-factor totals (m x n)."""
        return np.add.reduceat(per_edge, self.f_start, axis=1)

    def variable_sums(self, per_edge: np.ndarray) -> np.ndarray:
        """Sum per-edge values (m x E) into per-variable totals (m x K)."""
        return np.add.reduceat(per_edge[:, self.v_order], self.v_start, axis=1)


@lru_cache(maxsize=64)
def _compiled(g: DirectedFactorGraph) -> _CompiledGraph:
    return _CompiledGraph(g)


def _step_v2f(c: _CompiledGraph, f2v: np.ndarray, v2f: np.ndarray, w: np.ndarray, beta: float) -> np.ndarray:
    incoming = c.variable_sums(f2v)
    fresh = c.variable_sums(np.abs(f2v)) == 0.0
    deg_e = c.v_degree[c.ev]
    w_e = w[:, c.ev]
    denom = np.maximum(deg_e - 1.0, 1.0)
    other_mean = (incoming[:, c.ev] - f2v) / denom
    blended = (1.0 - beta) * other_mean + beta * w_e
    use_weight = (deg_e <= 1.0) | fresh[:, c.ev]
    return np.where(use_weight, w_e, blended)


def _step_f2v(c: _CompiledGraph, v2f: np.ndarray) -> np.ndarray:
    """Balancing target per edge: the nonnegative value of the edge's variable
    that would zero the factor's residual given the other messages."""
    contrib = c.signed_coeff * v2f
    totals = c.factor_sums(contrib)
    excl = totals[:, c.ef] - contrib
    target = -c.sign * excl / c.coeff
    return np.maximum(target, 0.0)


def _mean_incoming(c: _CompiledGraph, f2v: np.ndarray, w: np.ndarray, eta_mode: str) -> np.ndarray:
    if eta_mode == "uniform":
        weighted = f2v
    else:
        imb = c.factor_sums(c.signed_coeff * w[:, c.ev])
        mag = np.abs(imb)
        peak = mag.max(axis=1, keepdims=True)
        eta = np.where(peak > 0.0, mag / np.where(peak > 0.0, peak, 1.0), 1.0)
        weighted = eta[:, c.ef] * f2v
    return c.variable_sums(weighted) / c.v_degree


def _step_weights(
    c: _CompiledGraph, f2v: np.ndarray, w: np.ndarray, beta: float, eta_mode: str
) -> np.ndarray:
    mean_msg = _mean_incoming(c, f2v, w, eta_mode)
    return np.maximum((1.0 - beta) * w + beta * mean_msg, 0.0)


def _l1_imbalance(c: _CompiledGraph, w: np.ndarray) -> np.ndarray:
    imb = c.factor_sums(c.signed_coeff * w[:, c.ev])
    return np.abs(imb).sum(axis=1)


def _run_kernel(
    c: _CompiledGraph, w0: np.ndarray, cfg: MpoConfig, want_trace: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[np.ndarray]]:
    """Balance all rows of ``w0``; rows freeze once their L1 drops below alpha.

    Messages are re-derived from the current weights every epoch.  Rows whose
    full-beta step would raise the L1 imbalance take a halved step instead
    (halving repeats until the epoch is non-increasing); rows that cannot make
    progress at any step size stop early as non-converged.  Rows never
    interact, so a batch run equals running each row alone.
    """
    m = w0.shape[0]
    w = w0.astype(float).copy()
    epochs_run = np.zeros(m, dtype=int)
    l1 = _l1_imbalance(c, w)
    active = l1 > cfg.alpha
    trace: list[np.ndarray] = []

    for _ in range(cfg.max_epochs):
        if not active.any():
            break
        v2f = w[:, c.ev]
        f2v = _step_f2v(c, v2f)
        mean_msg = _mean_incoming(c, f2v, w, cfg.eta_mode)
        if not np.isfinite(mean_msg[active]).all():
            bad = int(np.where(~np.isfinite(mean_msg).all(axis=1) & active)[0][0])
            raise MpoDivergenceError(f"non-finite messages in sample row {bad}")

        step = np.where(active, cfg.beta, 0.0)
        w_new = w.copy()
        l1_new = l1.copy()
        pending = active.copy()
        for _try in range(_MAX_BACKTRACKS):
            if not pending.any():
                break
            cand = np.maximum((1.0 - step[:, None]) * w + step[:, None] * mean_msg, 0.0)
            cand_l1 = _l1_imbalance(c, cand)
            ok = pending & (cand_l1 <= l1)
            w_new[ok] = cand[ok]
            l1_new[ok] = cand_l1[ok]
            pending &= ~ok
            step = np.where(pending, step * 0.5, step)
        # rows still pending cannot decrease their imbalance at any step: stop them
        stalled = pending
        w = w_new
        l1 = l1_new
        epochs_run[active] += 1
        if want_trace:
            trace.append(l1.copy())
        active = active & (l1 > cfg.alpha) & ~stalled

    converged = l1 <= cfg.alpha
    return w, epochs_run, converged, trace


def run_mpo(g: DirectedFactorGraph, w0: FluxVector, cfg: MpoConfig | None = None) -> tuple[FluxVector, MpoTrace]:
    """Balance one flux vector; returns the endpoint and its L1 trace."""
    cfg = cfg or MpoConfig()
    w0 = np.asarray(w0, dtype=float)
    if w0.shape != (g.n_variables,):
        raise ValueError(f"w0 must have length {g.n_variables}, got shape {w0.shape}")
    if (w0 < 0).any():
        raise ValueError("w0 entries must be nonnegative")
    c = _compiled(g)
    w, epochs, converged, trace = _run_kernel(c, w0[None, :], cfg, want_trace=True)
    l1 = np.array([t[0] for t in trace])
    return w[0], MpoTrace(l1_per_epoch=l1, epochs_run=int(epochs[0]), converged=bool(converged[0]))


def run_mpo_batch(
    g: DirectedFactorGraph,
    w0: FluxMatrix,
    cfg: MpoConfig | None = None,
    n_threads: int = 1,
) -> FluxMatrix:
    """Row-wise independent balancing of an m x K matrix.

    Rows are processed in contiguous chunks (optionally on a thread pool);
    because rows never interact the result is identical for any chunking.
    Divergence is reported with the offending row index.
    """
    cfg = cfg or MpoConfig()
    w0 = np.asarray(w0, dtype=float)
    if w0.ndim != 2 or w0.shape[1] != g.n_variables:
        raise ValueError(f"w0 must be m x {g.n_variables}, got shape {w0.shape}")
    if w0.shape[0] == 0:
        return w0.copy()
    if (w0 < 0).any():
        raise ValueError("w0 entries must be nonnegative")
    c = _compiled(g)

    def balance_chunk(start: int, stop: int) -> np.ndarray:
        try:
            w, _, _, _ = _run_kernel(c, w0[start:stop], cfg, want_trace=False)
        except MpoDivergenceError as exc:
            raise MpoDivergenceError(f"{exc} (rows {start}..{stop - 1})") from exc
        return w

    m = w0.shape[0]
    if n_threads <= 1 or m == 1:
        return balance_chunk(0, m)
    bounds = np.linspace(0, m, min(n_threads, m) + 1).astype(int)
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        parts = list(pool.map(lambda se: balance_chunk(*se), zip(bounds[:-1], bounds[1:])))
    return np.concatenate(parts, axis=0)


def batch_trace(
    g: DirectedFactorGraph, w0: FluxMatrix, cfg: MpoConfig | None = None
) -> tuple[FluxMatrix, np.ndarray]:
    """Like run_mpo_batch but also returns the mean-over-rows L1 trace."""
    cfg = cfg or MpoConfig()
    c = _compiled(g)
    w, _, _, trace = _run_kernel(c, np.asarray(w0, dtype=float), cfg, want_trace=True)
    return w, (np.stack(trace).mean(axis=1) if trace else np.zeros(0))


# -- granular single-sample operations (dict-keyed message state) ------------
#
# These expose the three phases one at a time for inspection and worked
# examples; they share the kernel math via pack/unpack and apply one plain
# step with no safeguarding.


def init_messages(g: DirectedFactorGraph) -> MessageState:
    """All-zero messages on every incident factor-variable pair, both ways."""
    c = _compiled(g)
    zeros_f2v = {key: 0.0 for key in c.edge_keys}
    zeros_v2f = {(v, f): 0.0 for (f, v) in c.edge_keys}
    return MessageState(msg_f2v=zeros_f2v, msg_v2f=zeros_v2f)


def _pack(g: DirectedFactorGraph, state: MessageState) -> tuple[np.ndarray, np.ndarray]:
    c = _compiled(g)
    f2v = np.array([[state.msg_f2v[(f, v)] for (f, v) in c.edge_keys]])
    v2f = np.array([[state.msg_v2f[(v, f)] for (f, v) in c.edge_keys]])
    return f2v, v2f


def _unpack(g: DirectedFactorGraph, f2v: np.ndarray, v2f: np.ndarray) -> MessageState:
    c = _compiled(g)
    return MessageState(
        msg_f2v={(f, v): float(f2v[0, i]) for i, (f, v) in enumerate(c.edge_keys)},
        msg_v2f={(v, f): float(v2f[0, i]) for i, (f, v) in enumerate(c.edge_keys)},
    )


def update_variable_to_factor(
    g: DirectedFactorGraph, state: MessageState, w: FluxVector, beta: float
) -> MessageState:
    """Blend of the other factors' messages with the current weight.

    Falls back to the raw weight for single-factor variables and while the
    incoming messages still sit at their zero initialization.
    """
    c = _compiled(g)
    f2v, v2f = _pack(g, state)
    w = np.asarray(w, dtype=float)[None, :]
    v2f_new = _step_v2f(c, f2v, v2f, w, beta)
    return _unpack(g, f2v, v2f_new)


def update_factor_to_variable(g: DirectedFactorGraph, state: MessageState) -> MessageState:
    """Per-factor balancing targets, one per incident variable."""
    c = _compiled(g)
    f2v, v2f = _pack(g, state)
    f2v_new = _step_f2v(c, v2f)
    return _unpack(g, f2v_new, v2f)


def update_weights(
    g: DirectedFactorGraph,
    state: MessageState,
    w: FluxVector,
    beta: float,
    eta_mode: str = "uniform",
) -> FluxVector:
    """Move each weight toward the (eta-weighted) mean of its factor messages."""
    if eta_mode not in ETA_MODES:
        raise ValueError(f"eta_mode must be one of {ETA_MODES}, got {eta_mode!r}")
    c = _compiled(g)
    f2v, _ = _pack(g, state)
    w = np.asarray(w, dtype=float)[None, :]
    return _step_weights(c, f2v, w, beta, eta_mode)[0]
