"""Synthetic benchmark generation.

Ground-truth flux is produced by balancing random positive draws with the
message-passing optimizer.  Observations are then solved backwards through a
per-variable nonlinear link (quadratic or exponentiated quadratic of the
feature row-sum), with ~20% of feature entries zeroed for sparsity.  All
randomness runs on counter-style substreams keyed by (seed, purpose, variable,
sample) so results never depend on generation order or worker count.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import (
    DirectedFactorGraph,
    Edge,
    FactorNode,
    FluxMatrix,
    FluxVector,
    GraphError,
    VariableNode,
    VARIABLE_TO_FACTOR,
    FACTOR_TO_VARIABLE,
    batch_factor_imbalances,
    load_graph,
    save_graph,
)
from .mpo import MpoConfig, MpoDivergenceError, run_mpo_batch

log = logging.getLogger(__name__)

NLF1 = "NLF1"
NLF2 = "NLF2"

# substream tags
_FLUX, _COEFF, _FEATURES, _GRAPH, _NOISE, _SPLIT = 0, 1, 2, 3, 4, 5

_LN_MAX = math.log(np.finfo(float).max)


@dataclass(frozen=True)
class NlfCoefficients:
    a: float
    b: float

    def __post_init__(self):
        if not 0.0 < self.a < 10.0 or not 0.0 < self.b < 10.0:
            raise ValueError(f"coefficients must lie in (0, 10), got a={self.a}, b={self.b}")


@dataclass
class ObservationSet:
    """Per-variable m x n_k feature matrices sharing one sample axis."""

    sample_ids: list[str]
    matrices: list[np.ndarray]

    def __post_init__(self):
        m = len(self.sample_ids)
        for k, mat in enumerate(self.matrices):
            if mat.shape[0] != m:
                raise ValueError(f"variable {k} has {mat.shape[0]} rows, expected {m}")

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def subset(self, indices: np.ndarray) -> "ObservationSet":
        ids = [self.sample_ids[i] for i in indices]
        return ObservationSet(ids, [mat[indices] for mat in self.matrices])


@dataclass
class SyntheticDataset:
    graph: DirectedFactorGraph
    flux_truth: FluxMatrix
    observations: ObservationSet
    coefficients: list[NlfCoefficients]
    kind: str
    seed: int
    sparsity: float = 0.2
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    nlf2_row_scale: np.ndarray | None = None
    max_flux_ratio: float | None = None


def nlf_forward(kind: str, coeff: NlfCoefficients, s: float) -> float:
    """Link from a feature row-sum to a flux value."""
    if s < 0:
        raise ValueError(f"row sum must be nonnegative, got {s}")
    t = coeff.a * s * s + coeff.b * s
    if kind == NLF1:
        return t
    if kind == NLF2:
        if t > _LN_MAX:
            raise OverflowError(f"exp({t:.3g}) exceeds the representable range")
        return math.exp(t)
    raise ValueError(f"kind must be {NLF1!r} or {NLF2!r}, got {kind!r}")


def nlf_invert(kind: str, coeff: NlfCoefficients, w: float) -> float:
    """Positive root of the link: the row-sum s with nlf_forward(s) == w."""
    if kind == NLF1:
        if w < 0:
            raise ValueError(f"NLF1 flux must be nonnegative, got {w}")
        t = w
    elif kind == NLF2:
        if w <= 0:
            raise ValueError(f"NLF2 flux must be positive, got {w}")
        t = math.log(w)
        if t < 0:
            if t < -1e-9:
                raise ValueError(f"NLF2 flux below representable range: {w} < 1")
            t = 0.0
    else:
        raise ValueError(f"kind must be {NLF1!r} or {NLF2!r}, got {kind!r}")
    return (-coeff.b + math.sqrt(coeff.b * coeff.b + 4.0 * coeff.a * t)) / (2.0 * coeff.a)


def _substream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def _positive_uniform(rng: np.random.Generator, size, scale: float = 1.0) -> np.ndarray:
    vals = rng.random(size) * scale
    while (vals == 0.0).any():
        zero = vals == 0.0
        vals[zero] = rng.random(int(zero.sum())) * scale
    return vals


def generate_balanced_flux(
    g: DirectedFactorGraph,
    m: int,
    seed: int,
    mpo_config: MpoConfig | None = None,
    stream: int = 0,
) -> FluxMatrix:
    """m balanced flux rows: uniform(0,1)x10 draws pushed through the balancer.

    ``stream`` selects an independent substream of the same seed (used by the
    dataset pipeline to redraw rows deterministically).
    """
    if m == 0:
        return np.zeros((0, g.n_variables))
    cfg = mpo_config or MpoConfig(alpha=1e-6, max_epochs=20_000)
    rng = _substream(seed, _FLUX, stream)
    w0 = _positive_uniform(rng, (m, g.n_variables), scale=10.0)
    w = run_mpo_batch(g, w0, cfg)
    l1 = np.abs(batch_factor_imbalances(g, w)).sum(axis=1)
    if (l1 > cfg.alpha).any():
        bad = int(np.argmax(l1))
        raise MpoDivergenceError(
            f"row {bad} did not balance below {cfg.alpha} within {cfg.max_epochs} epochs (L1={l1[bad]:.3g})"
        )
    return w


def generate_observations(
    g: DirectedFactorGraph,
    flux: FluxMatrix,
    kind: str,
    seed: int,
    sparsity: float = 0.2,
) -> tuple[ObservationSet, list[NlfCoefficients]]:
    """Backward-solve observations so each feature row-sum inverts to its flux.

    For every (sample, variable): draw positives, zero a ~``sparsity`` share
    (always keeping at least one survivor), normalize to sum one, then scale
    the row by the inverted link value.
    """
    flux = np.asarray(flux, dtype=float)
    m = flux.shape[0]
    if flux.ndim != 2 or flux.shape[1] != g.n_variables:
        raise ValueError(f"flux must be m x {g.n_variables}, got {flux.shape}")
    if (flux < 0).any():
        raise ValueError("flux entries must be nonnegative")
    if kind == NLF2 and (flux <= 0).any():
        raise ValueError("NLF2 requires strictly positive flux entries")

    coeff_rng = _substream(seed, _COEFF)
    coefficients = []
    for _ in range(g.n_variables):
        a, b = _positive_uniform(coeff_rng, 2, scale=10.0)
        coefficients.append(NlfCoefficients(float(a), float(b)))

    matrices = []
    for k, var in enumerate(g.variables):
        n_k = len(var.features)
        if n_k == 0:
            raise ValueError(f"variable {var.name!r} has no features to observe")
        n_zero = min(int(round(sparsity * n_k)), n_k - 1)
        mat = np.zeros((m, n_k))
        ck = coefficients[k]
        for j in range(m):
            rng = _substream(seed, _FEATURES, k, j)
            row = _positive_uniform(rng, n_k)
            if n_zero:
                row[rng.choice(n_k, size=n_zero, replace=False)] = 0.0
            row /= row.sum()
            mat[j] = row * nlf_invert(kind, ck, float(flux[j, k]))
        matrices.append(mat)

    sample_ids = [f"s{j}" for j in range(m)]
    return ObservationSet(sample_ids, matrices), coefficients


def split_indices(m: int, fractions=(0.6, 0.2, 0.2), seed: int = 42) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint exhaustive train/val/test index partition from a seeded shuffle."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if m < 3:
        raise ValueError(f"need at least 3 samples to split, got {m}")
    perm = _substream(seed, _SPLIT).permutation(m)
    n_train = int(math.floor(fractions[0] * m))
    n_val = int(math.floor(fractions[1] * m))
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def split_dataset(
    ds: SyntheticDataset, fractions=(0.6, 0.2, 0.2), seed: int | None = None
) -> tuple[SyntheticDataset, SyntheticDataset, SyntheticDataset]:
    """Split a dataset into train/val/test parts along the sample axis."""
    seed = ds.seed if seed is None else seed
    parts = split_indices(ds.flux_truth.shape[0], fractions, seed)
    out = []
    for idx in parts:
        out.append(
            SyntheticDataset(
                graph=ds.graph,
                flux_truth=ds.flux_truth[idx],
                observations=ds.observations.subset(idx),
                coefficients=ds.coefficients,
                kind=ds.kind,
                seed=ds.seed,
                sparsity=ds.sparsity,
                nlf2_row_scale=None if ds.nlf2_row_scale is None else ds.nlf2_row_scale[idx],
            )
        )
    return tuple(out)


def _collect_flux_rows(
    g: DirectedFactorGraph,
    m: int,
    seed: int,
    mpo_config: MpoConfig | None,
    max_flux_ratio: float | None,
    max_rounds: int = 50,
) -> FluxMatrix:
    if max_flux_ratio is None:
        return generate_balanced_flux(g, m, seed, mpo_config)
    kept: list[np.ndarray] = []
    for attempt in range(max_rounds):
        need = m - len(kept)
        if need == 0:
            break
        batch = generate_balanced_flux(g, need, seed, mpo_config, stream=attempt)
        ratio = batch.max(axis=1) / np.maximum(batch.min(axis=1), 1e-300)
        kept.extend(batch[ratio <= max_flux_ratio])
    if len(kept) < m:
        raise ValueError(
            f"could not draw {m} balanced rows with max/min ratio <= {max_flux_ratio} "
            f"in {max_rounds} rounds (got {len(kept)}); raise or disable max_flux_ratio"
        )
    return np.array(kept[:m])


def generate_dataset(
    g: DirectedFactorGraph,
    m: int,
    kind: str,
    seed: int,
    sparsity: float = 0.2,
    fractions=(0.6, 0.2, 0.2),
    mpo_config: MpoConfig | None = None,
    max_flux_ratio: float | None = None,
) -> SyntheticDataset:
    """Full pipeline: balanced truth, backward observations, split indices.

    ``max_flux_ratio`` redraws truth rows whose max/min entry ratio exceeds it
    (balanced endpoints can park variables arbitrarily close to zero, which
    makes poor regression targets).  NLF2 truth rows are rescaled so their
    minimum is 2 (pure scaling keeps them balanced, and a minimum strictly
    above 1 keeps every inverted row-sum positive); the applied factors are
    kept in ``nlf2_row_scale``.
    """
    flux = _collect_flux_rows(g, m, seed, mpo_config, max_flux_ratio)
    row_scale = None
    if kind == NLF2:
        mins = flux.min(axis=1)
        if (mins <= 0).any():
            raise ValueError("NLF2 requires strictly positive balanced flux rows")
        row_scale = np.where(mins < 2.0, 2.0 / mins, 1.0)
        flux = flux * row_scale[:, None]
    obs, coefficients = generate_observations(g, flux, kind, seed, sparsity)
    tr, va, te = split_indices(m, fractions, seed)
    return SyntheticDataset(
        graph=g,
        flux_truth=flux,
        observations=obs,
        coefficients=coefficients,
        kind=kind,
        seed=seed,
        sparsity=sparsity,
        splits={"train": tr, "val": va, "test": te},
        nlf2_row_scale=row_scale,
        max_flux_ratio=max_flux_ratio,
    )


def inject_orthogonal_noise(w: FluxVector, gamma: float, seed: int) -> FluxVector:
    """Noisy copy of a normalized target, deviated along directions orthogonal
    to it: w/|w| + gamma * sum(a_i v_i) + 0.1."""
    w = np.asarray(w, dtype=float)
    norm = np.linalg.norm(w)
    if norm == 0:
        raise ValueError("w must have nonzero norm")
    unit = w / norm
    dim = w.size
    n_dirs = min(3, dim - 1)
    if n_dirs < 3:
        log.warning("dimension %d < 4: using %d orthogonal direction(s)", dim, n_dirs)
    rng = _substream(seed, _NOISE)
    basis = [unit]
    directions = []
    while len(directions) < n_dirs:
        cand = rng.normal(size=dim)
        for b in basis:
            cand = cand - (cand @ b) * b
        nc = np.linalg.norm(cand)
        if nc < 1e-12:
            continue
        cand /= nc
        basis.append(cand)
        directions.append(cand)
    coeffs = rng.random(n_dirs)
    noisy = unit + 0.1
    for a_i, v_i in zip(coeffs, directions):
        noisy = noisy + gamma * a_i * v_i
    return noisy


def generate_test_graph(
    n_factors: int,
    n_variables: int,
    n_cycles: int = 0,
    seed: int = 42,
    feature_range: tuple[int, int] = (8, 16),
) -> DirectedFactorGraph:
    """Random connected benchmark graph of roughly the requested size.

    A source -> chain -> sink backbone covers every factor (each gets at least
    one parent and one child variable).  Cycles come from back-edge variables
    on ``n_cycles`` distinct chain hops; because every other edge points
    strictly forward along the chain, each back edge closes exactly one
    elementary cycle.  The remaining variable budget attaches as extra
    sources, sinks, or forward connectors.
    """
    if n_factors < 1:
        raise GraphError("need at least one factor")
    if n_cycles > n_factors - 1:
        raise GraphError(f"{n_cycles} cycles need at least {n_cycles + 1} factors")
    needed = n_factors + 1 + n_cycles
    if n_variables < needed:
        raise GraphError(
            f"infeasible: {n_factors} factors with {n_cycles} cycles needs >= {needed} variables"
        )
    rng = _substream(seed, _GRAPH)
    factors = tuple(FactorNode(i, f"m{i}") for i in range(n_factors))

    # edge plan per variable: (factors it drains, factors it feeds)
    plans: list[tuple[list[int], list[int]]] = []
    plans.append(([], [0]))
    for i in range(1, n_factors):
        plans.append(([i - 1], [i]))
    plans.append(([n_factors - 1], []))
    reserved_hops: set[int] = set()
    if n_cycles:
        hops = rng.choice(n_factors - 1, size=n_cycles, replace=False)
        for a in sorted(int(h) for h in hops):
            plans.append(([a + 1], [a]))
            reserved_hops.add(a)
    while len(plans) < n_variables:
        roll = rng.random()
        if roll < 0.2 or n_factors == 1:
            plans.append(([], [int(rng.integers(0, n_factors))]))
        elif roll < 0.4:
            plans.append(([int(rng.integers(0, n_factors))], []))
        else:
            a = int(rng.integers(0, n_factors - 1))
            b = int(rng.integers(a + 1, n_factors))
            if b == a + 1 and a in reserved_hops:
                continue  # keep reserved hops single-path so cycle counts stay exact
            sources, targets = [a], [b]
            if a > 0 and rng.random() < 0.25:
                extra = int(rng.integers(0, a))
                if extra not in sources:
                    sources.append(extra)
            if b < n_factors - 1 and rng.random() < 0.25:
                extra = int(rng.integers(b + 1, n_factors))
                if extra not in targets:
                    targets.append(extra)
            plans.append((sources, targets))

    feature_counter = 0
    variables = []
    edges = []
    lo, hi = feature_range
    for k, (sources, targets) in enumerate(plans):
        n_feat = int(rng.integers(lo, hi + 1))
        names = tuple(f"g{feature_counter + i}" for i in range(n_feat))
        feature_counter += n_feat
        variables.append(VariableNode(k, f"r{k}", names))
        for f in sources:
            edges.append(Edge(f, k, FACTOR_TO_VARIABLE))
        for f in targets:
            edges.append(Edge(f, k, VARIABLE_TO_FACTOR))
    return DirectedFactorGraph(factors, tuple(variables), tuple(edges))


# -- dataset disk format ------------------------------------------------------


def _format_float(x: float) -> str:
    return repr(float(x))


def save_dataset(path, ds: SyntheticDataset) -> None:
    """Write graph.json, obs_<variable>.csv, flux_truth.csv and meta.json."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    save_graph(root / "graph.json", ds.graph)
    for k, var in enumerate(ds.graph.variables):
        mat = ds.observations.matrices[k]
        with open(root / f"obs_{var.name}.csv", "w", encoding="utf-8") as fh:
            fh.write(",".join(["sample_id", *var.features]) + "\n")
            for j, sid in enumerate(ds.observations.sample_ids):
                fh.write(",".join([sid, *(_format_float(x) for x in mat[j])]) + "\n")
    with open(root / "flux_truth.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(ds.graph.variable_names) + "\n")
        for row in ds.flux_truth:
            fh.write(",".join(_format_float(x) for x in row) + "\n")
    meta = {
        "kind": ds.kind,
        "seed": ds.seed,
        "sparsity": ds.sparsity,
        "max_flux_ratio": ds.max_flux_ratio,
        "coefficients": [[c.a, c.b] for c in ds.coefficients],
        "splits": {name: [int(i) for i in idx] for name, idx in ds.splits.items()},
        "nlf2_row_scale": None if ds.nlf2_row_scale is None else list(ds.nlf2_row_scale),
    }
    with open(root / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_dataset(path) -> SyntheticDataset:
    root = Path(path)
    g = load_graph(root / "graph.json")
    with open(root / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(root / "flux_truth.csv", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header != g.variable_names:
            raise ValueError("flux_truth.csv header does not match the graph's variables")
        flux = np.array([[float(x) for x in line.rstrip("\n").split(",")] for line in fh if line.strip()])
    flux = flux.reshape(-1, g.n_variables)
    matrices = []
    sample_ids: list[str] | None = None
    for var in g.variables:
        with open(root / f"obs_{var.name}.csv", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split(",")
            if header != ["sample_id", *var.features]:
                raise ValueError(f"obs_{var.name}.csv header does not match the variable's features")
            ids, rows = [], []
            for line in fh:
                if not line.strip():
                    continue
                cells = line.rstrip("\n").split(",")
                ids.append(cells[0])
                rows.append([float(x) for x in cells[1:]])
        if sample_ids is None:
            sample_ids = ids
        elif ids != sample_ids:
            raise ValueError(f"obs_{var.name}.csv sample ids disagree with earlier files")
        matrices.append(np.array(rows).reshape(len(ids), len(var.features)))
    obs = ObservationSet(sample_ids or [], matrices)
    scale = meta.get("nlf2_row_scale")
    return SyntheticDataset(
        graph=g,
        flux_truth=flux,
        observations=obs,
        coefficients=[NlfCoefficients(a, b) for a, b in meta["coefficients"]],
        kind=meta["kind"],
        seed=meta["seed"],
        sparsity=meta["sparsity"],
        splits={name: np.array(idx, dtype=int) for name, idx in meta["splits"].items()},
        nlf2_row_scale=None if scale is None else np.array(scale),
        max_flux_ratio=meta.get("max_flux_ratio"),
    )
