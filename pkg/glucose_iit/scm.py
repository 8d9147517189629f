"""Deterministic structural causal models: registry, evaluation and interventions.

Graphs are immutable once built. Evaluation makes a single pass over a
topological order (ties broken lexicographically), so a graph with a cycle
cannot be evaluated and is reported with its strongly connected components.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Sequence

from glucose_iit.errors import (
    CycleDetected,
    MissingExogenous,
    NonFiniteValue,
    UnknownVariable,
)

logger = logging.getLogger(__name__)

VariableId = str
Rule = Callable[[Mapping[VariableId, float]], float]


@dataclass(frozen=True)
class StructuralEquation:
    target: VariableId
    parents: tuple[VariableId, ...]
    rule: Rule
    rule_id: str = ""


@dataclass(frozen=True)
class Intervention:
    """Clamp values keyed by variable; an empty intervention is the factual run."""

    clamps: Mapping[VariableId, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "clamps", MappingProxyType(dict(self.clamps)))

    @classmethod
    def none(cls) -> "Intervention":
        return cls({})


@dataclass(frozen=True)
class CausalGraph:
    variables: frozenset[VariableId]
    equations: Mapping[VariableId, StructuralEquation]
    exogenous: frozenset[VariableId]

    @classmethod
    def build(
        cls,
        equations: Iterable[StructuralEquation],
        exogenous: Iterable[VariableId],
    ) -> "CausalGraph":
        """
        Register equations and exogenous inputs, checking every edge endpoint.

        Args:
            equations: One equation per endogenous variable.
            exogenous: Names of the input variables (no equation).

        Returns:
            CausalGraph: The frozen graph.

        Raises:
            ValueError: If a variable has two equations or an exogenous variable has one.
            UnknownVariable: If a parent is neither endogenous nor exogenous.
        """
        exo = frozenset(exogenous)
        table: dict[VariableId, StructuralEquation] = {}
        for eq in equations:
            if eq.target in table:
                raise ValueError(f"Duplicate equation for {eq.target}")
            if eq.target in exo:
                raise ValueError(f"Exogenous variable {eq.target} cannot have an equation")
            table[eq.target] = eq
        variables = exo | frozenset(table)
        for eq in table.values():
            for parent in eq.parents:
                if parent not in variables:
                    raise UnknownVariable(parent)
        return cls(variables=variables, equations=MappingProxyType(table), exogenous=exo)

    @property
    def endogenous(self) -> frozenset[VariableId]:
        return frozenset(self.equations)

    def parents(self, variable: VariableId) -> tuple[VariableId, ...]:
        if variable not in self.variables:
            raise UnknownVariable(variable)
        eq = self.equations.get(variable)
        return eq.parents if eq is not None else ()

    def edges(self) -> list[tuple[VariableId, VariableId]]:
        return sorted(
            (parent, eq.target) for eq in self.equations.values() for parent in eq.parents
        )

    @cached_property
    def children(self) -> Mapping[VariableId, tuple[VariableId, ...]]:
        kids: dict[VariableId, list[VariableId]] = {v: [] for v in self.variables}
        for parent, child in self.edges():
            kids[parent].append(child)
        return MappingProxyType({v: tuple(sorted(c)) for v, c in kids.items()})

    def descendants(self, variable: VariableId) -> frozenset[VariableId]:
        """All variables reachable from `variable` along parent→child edges."""
        seen: set[VariableId] = set()
        stack = list(self.children[variable])
        while stack:
            node = stack.pop()
            if node not in seen:
                seen.add(node)
                stack.extend(self.children[node])
        return frozenset(seen)

    def to_json(self) -> dict:
        """Structure-only export: variables, exogenous inputs, edges and rule identifiers."""
        return {
            "variables": sorted(self.variables),
            "exogenous": sorted(self.exogenous),
            "edges": [list(edge) for edge in self.edges()],
            "equations": {
                target: {"parents": list(eq.parents), "rule": eq.rule_id}
                for target, eq in sorted(self.equations.items())
            },
        }


def strongly_connected_components(
    nodes: Iterable[str], parents_of: Callable[[str], Iterable[str]]
) -> list[list[str]]:
    """Tarjan's algorithm over child edges; returns every component, sorted."""
    node_list = sorted(nodes)
    children: dict[str, list[str]] = {n: [] for n in node_list}
    for node in node_list:
        for parent in parents_of(node):
            if parent in children:
                children[parent].append(node)

    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    components: list[list[str]] = []
    counter = 0

    def connect(node: str) -> None:
        nonlocal counter
        index[node] = low[node] = counter
        counter += 1
        stack.append(node)
        on_stack.add(node)
        for child in sorted(children[node]):
            if child not in index:
                connect(child)
                low[node] = min(low[node], low[child])
            elif child in on_stack:
                low[node] = min(low[node], index[child])
        if low[node] == index[node]:
            component = []
            while True:
                member = stack.pop()
                on_stack.discard(member)
                component.append(member)
                if member == node:
                    break
            components.append(sorted(component))

    for node in node_list:
        if node not in index:
            connect(node)
    return sorted(components)


def topological_sort(
    nodes: Iterable[str], parents_of: Callable[[str], Iterable[str]]
) -> list[str]:
    """
    Kahn's algorithm with a min-heap, so ties resolve lexicographically.

    Args:
        nodes: Every node of the graph.
        parents_of: Maps a node to its parents (all of which must be in `nodes`).

    Returns:
        list[str]: Nodes with every parent ahead of its children.

    Raises:
        CycleDetected: With the cyclic strongly connected components when no order exists.
    """
    node_set = set(nodes)
    indegree = {n: 0 for n in node_set}
    children: dict[str, list[str]] = {n: [] for n in node_set}
    for node in node_set:
        for parent in parents_of(node):
            indegree[node] += 1
            children[parent].append(node)

    ready = [n for n, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for child in children[node]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(ready, child)

    if len(order) != len(node_set):
        remaining = {n for n, d in indegree.items() if d > 0}
        cyclic = [
            c
            for c in strongly_connected_components(remaining, parents_of)
            if len(c) > 1 or c[0] in set(parents_of(c[0]))
        ]
        raise CycleDetected(cyclic)
    return order


def topo_order(graph: CausalGraph) -> list[VariableId]:
    return topological_sort(graph.variables, graph.parents)


def evaluate(
    graph: CausalGraph,
    exogenous_values: Mapping[VariableId, float],
    intervention: Intervention | None = None,
) -> dict[VariableId, float]:
    """
    Evaluate every variable once, in topological order.

    Clamped variables take their clamp value and are not recomputed; their
    descendants read the clamped value. Clamping an exogenous variable
    overrides (and excuses) its input value.

    Raises:
        UnknownVariable: If the intervention names a variable outside the graph.
        MissingExogenous: If an unclamped exogenous variable has no value.
        CycleDetected: If the graph is cyclic.
        NonFiniteValue: If an input or a rule output is NaN or infinite.
    """
    clamps = intervention.clamps if intervention is not None else {}
    for name in clamps:
        if name not in graph.variables:
            raise UnknownVariable(name)
    missing = graph.exogenous - set(exogenous_values) - set(clamps)
    if missing:
        raise MissingExogenous(missing)

    values: dict[VariableId, float] = {}
    for variable in topo_order(graph):
        if variable in clamps:
            value = float(clamps[variable])
        elif variable in graph.exogenous:
            value = float(exogenous_values[variable])
        else:
            eq = graph.equations[variable]
            value = float(eq.rule({p: values[p] for p in eq.parents}))
        if not math.isfinite(value):
            raise NonFiniteValue(variable)
        values[variable] = value
    return values


def interchange(
    graph: CausalGraph,
    base: Mapping[VariableId, float],
    source: Mapping[VariableId, float],
    site: VariableId | Sequence[VariableId],
    *,
    source_graph: CausalGraph | None = None,
) -> tuple[dict[VariableId, float], float | dict[VariableId, float]]:
    """
    Run `source`, read the site value(s), and clamp them into a run on `base`.

    A sequence of sites clamps all of them jointly from the same source run.
    `source_graph` lets the source be evaluated under its own constants (two
    patients from different age groups); it defaults to `graph`.

    Returns:
        The counterfactual assignment and the site value (a float for a single
        site, a mapping for a sequence of sites).
    """
    sites = [site] if isinstance(site, str) else list(site)
    for name in sites:
        if name not in graph.variables:
            raise UnknownVariable(name)
        if name in graph.exogenous:
            raise UnknownVariable(f"{name} (interchange sites must be endogenous)")
    source_run = evaluate(source_graph or graph, source)
    site_values = {name: source_run[name] for name in sites}
    counterfactual = evaluate(graph, base, Intervention(site_values))
    if isinstance(site, str):
        return counterfactual, site_values[site]
    return counterfactual, site_values
