"""Balancing with Real Weights (BRW), the additive comparison baseline.

Each sweep walks the factors in id order, sums the parent variables' weights
and adds an equal share of that sum to every child variable.  Updates are
applied in place within a sweep, so later factors see earlier adjustments.
"""

from __future__ import annotations

import numpy as np

from .graph import DirectedFactorGraph, FluxMatrix, FluxVector


def brw_balance(g: DirectedFactorGraph, w0: FluxVector, epochs: int = 10) -> FluxVector:
    w0 = np.asarray(w0, dtype=float)
    if w0.shape != (g.n_variables,):
        raise ValueError(f"w0 must have length {g.n_variables}, got shape {w0.shape}")
    if (w0 < 0).any():
        raise ValueError("w0 entries must be nonnegative")
    return brw_balance_batch(g, w0[None, :], epochs)[0]


def brw_balance_batch(g: DirectedFactorGraph, w0: FluxMatrix, epochs: int = 10) -> FluxMatrix:
    """Row-wise BRW sweeps; factors with no children are skipped."""
    w = np.asarray(w0, dtype=float).copy()
    if w.ndim != 2 or w.shape[1] != g.n_variables:
        raise ValueError(f"w0 must be m x {g.n_variables}, got shape {w.shape}")
    parent_ids = [np.array([v for v, _ in ps], dtype=np.intp) for ps in g.parents_of_factor]
    child_ids = [np.array([v for v, _ in cs], dtype=np.intp) for cs in g.children_of_factor]
    for _ in range(epochs):
        for i in range(g.n_factors):
            children = child_ids[i]
            if children.size == 0:
                continue
            s = w[:, parent_ids[i]].sum(axis=1) if parent_ids[i].size else np.zeros(w.shape[0])
            w[:, children] += (s / children.size)[:, None]
    return w
