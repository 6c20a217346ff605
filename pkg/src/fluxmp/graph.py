"""Directed factor graph data model.

A directed factor graph (DFG) is a bipartite graph of factor nodes (conserved
pools, e.g. metabolites) and variable nodes (mass-carrying flows, e.g.
reactions).  A variable directed into a factor is a *parent* of that factor
(in-flux); a variable a factor points to is its *child* (out-flux).  A flux
assignment is balanced when, at every factor, total parent flux equals total
child flux.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from itertools import islice

import networkx as nx
import numpy as np

VARIABLE_TO_FACTOR = "variable_to_factor"
FACTOR_TO_VARIABLE = "factor_to_variable"

#: type aliases; flux values are plain float64 arrays
FluxVector = np.ndarray
FluxMatrix = np.ndarray
StoichiometricMatrix = np.ndarray


class GraphError(ValueError):
    """Malformed or inconsistent graph document."""


@dataclass(frozen=True)
class FactorNode:
    id: int
    name: str


@dataclass(frozen=True)
class VariableNode:
    id: int
    name: str
    features: tuple[str, ...] = ()


@dataclass(frozen=True)
class Edge:
    factor: int
    variable: int
    direction: str
    coefficient: float = 1.0

    @property
    def is_parent(self) -> bool:
        """True when the variable feeds the factor (in-flux edge)."""
        return self.direction == VARIABLE_TO_FACTOR


@dataclass(frozen=True)
class DirectedFactorGraph:
    factors: tuple[FactorNode, ...]
    variables: tuple[VariableNode, ...]
    edges: tuple[Edge, ...]

    def __post_init__(self):
        _validate(self)

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    @property
    def variable_names(self) -> list[str]:
        return [v.name for v in self.variables]

    @cached_property
    def parents_of_factor(self) -> list[list[tuple[int, float]]]:
        """Per factor: (variable id, coefficient) of its in-flux edges."""
        out: list[list[tuple[int, float]]] = [[] for _ in self.factors]
        for e in self.edges:
            if e.is_parent:
                out[e.factor].append((e.variable, e.coefficient))
        return out

    @cached_property
    def children_of_factor(self) -> list[list[tuple[int, float]]]:
        """Per factor: (variable id, coefficient) of its out-flux edges."""
        out: list[list[tuple[int, float]]] = [[] for _ in self.factors]
        for e in self.edges:
            if not e.is_parent:
                out[e.factor].append((e.variable, e.coefficient))
        return out

    @cached_property
    def factors_of_variable(self) -> list[list[int]]:
        """Per variable: ids of all adjacent factors, in edge order."""
        out: list[list[int]] = [[] for _ in self.variables]
        for e in self.edges:
            out[e.variable].append(e.factor)
        return out

    @cached_property
    def signed_incidence(self) -> np.ndarray:
        """n_factors x n_variables matrix; +coeff on parent edges, -coeff on
        child edges, so that ``signed_incidence @ w`` is the factor imbalance
        vector (in-flux minus out-flux)."""
        s = np.zeros((self.n_factors, self.n_variables))
        for e in self.edges:
            s[e.factor, e.variable] = e.coefficient if e.is_parent else -e.coefficient
        return s


def _validate(g: DirectedFactorGraph) -> None:
    if not g.factors:
        raise GraphError("graph has no factor nodes")
    if not g.variables:
        raise GraphError("graph has no variable nodes")
    for i, f in enumerate(g.factors):
        if f.id != i:
            raise GraphError(f"factor ids must be dense 0..n-1 in order; got {f.id} at position {i}")
    for k, v in enumerate(g.variables):
        if v.id != k:
            raise GraphError(f"variable ids must be dense 0..K-1 in order; got {v.id} at position {k}")

    seen: set[tuple[int, int, str]] = set()
    parent_sets: list[set[int]] = [set() for _ in g.variables]
    child_sets: list[set[int]] = [set() for _ in g.variables]
    factor_touched = [False] * len(g.factors)
    variable_touched = [False] * len(g.variables)
    for e in g.edges:
        if not 0 <= e.factor < len(g.factors):
            raise GraphError(f"edge references unknown factor id {e.factor}")
        if not 0 <= e.variable < len(g.variables):
            raise GraphError(f"edge references unknown variable id {e.variable}")
        if e.direction not in (VARIABLE_TO_FACTOR, FACTOR_TO_VARIABLE):
            raise GraphError(f"bad edge direction {e.direction!r}")
        if not np.isfinite(e.coefficient) or e.coefficient <= 0:
            raise GraphError(f"edge coefficient must be a positive magnitude; got {e.coefficient}")
        key = (e.factor, e.variable, e.direction)
        if key in seen:
            raise GraphError(f"duplicate edge {key}")
        seen.add(key)
        factor_touched[e.factor] = True
        variable_touched[e.variable] = True
        if e.is_parent:
            parent_sets[e.variable].add(e.factor)
        else:
            child_sets[e.variable].add(e.factor)
    for i, touched in enumerate(factor_touched):
        if not touched:
            raise GraphError(f"factor {g.factors[i].name!r} has no incident edges")
    for k, touched in enumerate(variable_touched):
        if not touched:
            raise GraphError(f"variable {g.variables[k].name!r} has no incident edges")
    for k in range(len(g.variables)):
        overlap = parent_sets[k] & child_sets[k]
        if overlap:
            raise GraphError(
                f"variable {g.variables[k].name!r} appears on both sides of factor(s) {sorted(overlap)}"
            )


def parse_graph(text: str) -> DirectedFactorGraph:
    """Parse and validate a JSON graph document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise GraphError("document root must be an object")
    for key in ("factors", "variables", "edges"):
        if key not in doc or not isinstance(doc[key], list):
            raise GraphError(f"document must contain a {key!r} list")

    factors = []
    for pos, item in enumerate(doc["factors"]):
        try:
            factors.append(FactorNode(id=int(item["id"]), name=str(item["name"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphError(f"bad factor entry at position {pos}: {exc}") from exc
    variables = []
    for pos, item in enumerate(doc["variables"]):
        try:
            feats = tuple(str(x) for x in item.get("features", []))
            variables.append(VariableNode(id=int(item["id"]), name=str(item["name"]), features=feats))
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphError(f"bad variable entry at position {pos}: {exc}") from exc
    edges = []
    for pos, item in enumerate(doc["edges"]):
        try:
            edges.append(
                Edge(
                    factor=int(item["factor"]),
                    variable=int(item["variable"]),
                    direction=str(item["direction"]),
                    coefficient=float(item.get("coefficient", 1.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphError(f"bad edge entry at position {pos}: {exc}") from exc
    return DirectedFactorGraph(tuple(factors), tuple(variables), tuple(edges))


def serialize_graph(g: DirectedFactorGraph) -> str:
    """Serialize to the JSON document format (stable key order)."""
    doc = {
        "factors": [{"id": f.id, "name": f.name} for f in g.factors],
        "variables": [
            {"id": v.id, "name": v.name, "features": list(v.features)} for v in g.variables
        ],
        "edges": [
            {
                "factor": e.factor,
                "variable": e.variable,
                "direction": e.direction,
                "coefficient": e.coefficient,
            }
            for e in g.edges
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def load_graph(path) -> DirectedFactorGraph:
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read())


def save_graph(path, g: DirectedFactorGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_graph(g))


def build_stoichiometry(g: DirectedFactorGraph) -> StoichiometricMatrix:
    """Signed factor x variable coefficient matrix.

    Entry (i, k) is -coeff when variable k is a parent of factor i (feeds it)
    and +coeff when it is a child; this is the negative of
    ``signed_incidence``, so balance reads ``gamma @ w == 0`` either way.
    """
    return -g.signed_incidence.copy()


def factor_imbalances(g: DirectedFactorGraph, flux: FluxVector) -> np.ndarray:
    """Per-factor in-flux minus out-flux for one flux vector."""
    flux = np.asarray(flux, dtype=float)
    if flux.shape != (g.n_variables,):
        raise ValueError(f"flux must have length {g.n_variables}, got shape {flux.shape}")
    return g.signed_incidence @ flux


def batch_factor_imbalances(g: DirectedFactorGraph, flux: FluxMatrix) -> np.ndarray:
    """Row-wise factor imbalances for an m x K flux matrix; returns m x n."""
    flux = np.asarray(flux, dtype=float)
    if flux.ndim != 2 or flux.shape[1] != g.n_variables:
        raise ValueError(f"flux matrix must be m x {g.n_variables}, got shape {flux.shape}")
    return flux @ g.signed_incidence.T


def imbalance_loss(g: DirectedFactorGraph, flux: FluxVector, norm: str = "l1") -> float:
    """Aggregate imbalance: L1 sum of absolute values or L2 norm."""
    imb = factor_imbalances(g, flux)
    if norm == "l1":
        return float(np.abs(imb).sum())
    if norm == "l2":
        return float(np.sqrt((imb**2).sum()))
    raise ValueError(f"norm must be 'l1' or 'l2', got {norm!r}")


def count_cycles(g: DirectedFactorGraph, cap: int = 10_000) -> int:
    """Number of elementary directed cycles (diagnostic).

    Enumeration stops at ``cap``; a return value equal to ``cap`` means
    "at least cap".
    """
    dg = nx.DiGraph()
    for e in g.edges:
        f, v = ("f", e.factor), ("v", e.variable)
        if e.is_parent:
            dg.add_edge(v, f)
        else:
            dg.add_edge(f, v)
    return sum(1 for _ in islice(nx.simple_cycles(dg), cap))
