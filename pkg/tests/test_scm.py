from __future__ import annotations

import math

import numpy as np
import pytest

from glucose_iit.errors import CycleDetected, MissingExogenous, NonFiniteValue, UnknownVariable
from glucose_iit.glucose_model import (
    AMENDED_PARENTS,
    FluxParameters,
    KineticConstants,
    ModelVariant,
    build_compressed_scm,
)
from glucose_iit.scm import (
    CausalGraph,
    Intervention,
    StructuralEquation,
    evaluate,
    interchange,
    topo_order,
    topological_sort,
)


def toy_graph() -> CausalGraph:
    """u -> b = 2u -> c = b + u."""
    return CausalGraph.build(
        [
            StructuralEquation("b", ("u",), lambda v: 2 * v["u"], "double"),
            StructuralEquation("c", ("b", "u"), lambda v: v["b"] + v["u"], "sum"),
        ],
        exogenous=["u"],
    )


def test_topological_ties_break_lexicographically():
    assert topological_sort(["c", "a", "b"], lambda n: ()) == ["a", "b", "c"]


def test_topological_sort_respects_edges():
    parents = {"a": ("c",), "b": (), "c": ("b",)}
    assert topological_sort(parents, parents.__getitem__) == ["b", "c", "a"]


def test_cycle_reports_components():
    parents = {"a": ("b",), "b": ("a",), "c": ()}
    with pytest.raises(CycleDetected) as info:
        topological_sort(parents, parents.__getitem__)
    assert info.value.components == [["a", "b"]]


def test_evaluate_toy():
    values = evaluate(toy_graph(), {"u": 3})
    assert values == {"u": 3.0, "b": 6.0, "c": 9.0}


def test_clamp_overrides_rule_and_feeds_descendants():
    values = evaluate(toy_graph(), {"u": 3}, Intervention({"b": 10}))
    assert values["b"] == 10.0
    assert values["c"] == 13.0


def test_clamping_exogenous_excuses_missing_input():
    values = evaluate(toy_graph(), {}, Intervention({"u": 1}))
    assert values["c"] == 3.0


def test_unknown_clamp_variable():
    with pytest.raises(UnknownVariable):
        evaluate(toy_graph(), {"u": 1}, Intervention({"z": 0}))


def test_missing_exogenous():
    with pytest.raises(MissingExogenous) as info:
        evaluate(toy_graph(), {})
    assert info.value.names == ["u"]


def test_non_finite_rule_output():
    graph = CausalGraph.build(
        [StructuralEquation("b", ("u",), lambda v: math.log(v["u"]) * math.inf)],
        exogenous=["u"],
    )
    with pytest.raises(NonFiniteValue):
        evaluate(graph, {"u": 2.0})


def test_build_rejects_bad_equations():
    eq = StructuralEquation("b", ("u",), lambda v: v["u"])
    with pytest.raises(ValueError):
        CausalGraph.build([eq, eq], exogenous=["u"])
    with pytest.raises(UnknownVariable):
        CausalGraph.build([StructuralEquation("b", ("ghost",), lambda v: 0.0)], exogenous=["u"])


def test_interchange_toy_closed_form():
    counterfactual, site_value = interchange(toy_graph(), {"u": 1}, {"u": 5}, "b")
    assert site_value == 10.0
    assert counterfactual["c"] == 11.0


def test_interchange_rejects_exogenous_site():
    with pytest.raises(UnknownVariable):
        interchange(toy_graph(), {"u": 1}, {"u": 5}, "u")


def test_multi_site_interchange_clamps_jointly():
    graph = CausalGraph.build(
        [
            StructuralEquation("a", ("u",), lambda v: v["u"] + 1),
            StructuralEquation("b", ("u",), lambda v: v["u"] * 3),
            StructuralEquation("c", ("a", "b"), lambda v: v["a"] * v["b"]),
        ],
        exogenous=["u"],
    )
    counterfactual, sites = interchange(graph, {"u": 1}, {"u": 2}, ["a", "b"])
    assert sites == {"a": 3.0, "b": 6.0}
    assert counterfactual["c"] == 18.0


def test_interchange_with_source_graph():
    other = CausalGraph.build(
        [
            StructuralEquation("b", ("u",), lambda v: 100 * v["u"]),
            StructuralEquation("c", ("b", "u"), lambda v: v["b"] + v["u"]),
        ],
        exogenous=["u"],
    )
    counterfactual, site_value = interchange(toy_graph(), {"u": 1}, {"u": 1}, "b", source_graph=other)
    assert site_value == 100.0
    assert counterfactual["c"] == 101.0


def random_dag(rng: np.random.Generator) -> CausalGraph:
    n = int(rng.integers(2, 9))
    names = [f"v{i}" for i in range(n)]
    equations = []
    for i, name in enumerate(names):
        candidates = ["e"] + names[:i]
        count = int(rng.integers(1, len(candidates) + 1))
        parents = tuple(rng.choice(candidates, size=count, replace=False).tolist())
        weights = dict(zip(parents, rng.normal(size=count).tolist()))
        bias = float(rng.normal())
        equations.append(
            StructuralEquation(
                name,
                parents,
                lambda v, w=weights, b=bias: b + sum(wk * math.tanh(v[p]) for p, wk in w.items()),
            )
        )
    return CausalGraph.build(equations, exogenous=["e"])


def test_identity_interchange_on_random_graphs():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        graph = random_dag(rng)
        base = {"e": float(rng.normal())}
        site = str(rng.choice(sorted(graph.endogenous)))
        counterfactual, _ = interchange(graph, base, base, site)
        assert counterfactual == evaluate(graph, base)


def test_descendants():
    graph = toy_graph()
    assert graph.descendants("u") == {"b", "c"}
    assert graph.descendants("c") == frozenset()


def compressed(variant: ModelVariant) -> CausalGraph:
    return build_compressed_scm(variant, KineticConstants.zero(), FluxParameters.zero(), 30.0)


def test_amended_edges_match_parent_table():
    graph = compressed(ModelVariant.AMENDED)
    expected = sorted(
        [(f"{target}_0", target) for target in AMENDED_PARENTS]
        + [(parent, target) for target, parents in AMENDED_PARENTS.items() for parent in parents]
    )
    assert graph.edges() == expected
    assert ("x4", "x5") not in graph.edges()
    assert ("x6", "x10") not in graph.edges()


def test_amended_order_puts_feedback_sources_first():
    order = topo_order(compressed(ModelVariant.AMENDED))
    assert order.index("x5") < order.index("x4")
    assert order.index("x10") < order.index("x6")
    assert order.index("x4") < order.index("x13")


def test_regular_graph_is_cyclic():
    with pytest.raises(CycleDetected) as info:
        topo_order(compressed(ModelVariant.REGULAR))
    assert info.value.components == [["x10", "x6"], ["x4", "x5"]]


def test_structure_export():
    exported = compressed(ModelVariant.AMENDED).to_json()
    assert len(exported["variables"]) == 28
    assert exported["equations"]["x13"]["parents"] == ["x13_0", "x4"]
    assert exported["equations"]["x13"]["rule"] == "compressed:amended:dx13dt"
