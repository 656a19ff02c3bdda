import json

import jsonschema
import pytest

import pallet_format as pf
from ancestry import (
    ANCESTRY_JSON_SCHEMA,
    AncestryEdge,
    AncestryGraph,
    ancestors,
    dependents,
    render_dot,
    render_json,
)
from annotations import LinkType, PalletKind, data_pallet_annotation
from conftest import shell_spec
from resilience import PalletNotFoundError
from runner import chain_nodes, run_node, wrap_files


def _node_lines(dot: str):
    return [line for line in dot.splitlines() if "[label=" in line and "->" not in line]


def _edge_lines(dot: str):
    return [line for line in dot.splitlines() if "->" in line]


@pytest.fixture
def three_chain(hub, work_dir):
    """Три узла с разными приложениями и deck, выход каждого идет на вход следующему"""
    apps, decks, specs = [], [], []
    for i in range(3):
        app = wrap_files({"tool.txt": f"tool {i}".encode()}, PalletKind.APPLICATION, f"app-{i}", hub,
                         deterministic=True, work_dir=work_dir)
        deck = wrap_files({"deck.txt": f"step={i}\n".encode()}, PalletKind.INPUT_DECK, f"deck-{i}", hub,
                          deterministic=True, work_dir=work_dir)
        script = "cat ../deck/deck.txt > step.txt" if i == 0 else "cat {IN:0}/step.txt ../deck/deck.txt > step.txt"
        apps.append(app)
        decks.append(deck)
        specs.append(shell_spec(app, deck, script, name=f"step-{i}"))
    data = chain_nodes(specs, hub, work_dir=work_dir)
    return apps, decks, data


def test_single_application(hub, app_id):
    g = ancestors(app_id, hub)
    assert list(g.nodes) == [app_id]
    assert g.edges == set()
    assert len(_node_lines(render_dot(g))) == 1


def test_single_run(hub, work_dir, writer_spec, app_id, deck_id):
    output_id, _ = run_node(writer_spec, hub, work_dir=work_dir)
    g = ancestors(output_id, hub)
    assert set(g.nodes) == {output_id, app_id, deck_id}
    assert g.edges == {
        AncestryEdge(output_id, app_id, LinkType.APPLICATION),
        AncestryEdge(output_id, deck_id, LinkType.INPUT_DECK),
    }
    assert g.nodes[output_id].kind == PalletKind.DATA_PALLET
    assert g.diagnostics == []


def test_three_node_chain(hub, three_chain):
    apps, decks, data = three_chain
    g = ancestors(data[2], hub)

    assert set(g.nodes) == set(apps) | set(decks) | set(data)
    expected = set()
    for i in range(3):
        expected.add(AncestryEdge(data[i], apps[i], LinkType.APPLICATION))
        expected.add(AncestryEdge(data[i], decks[i], LinkType.INPUT_DECK))
        if i:
            expected.add(AncestryEdge(data[i], data[i - 1], LinkType.INPUT_PALLET))
    assert g.edges == expected
    assert g.is_acyclic()
    assert all(node.resolved for node in g.nodes.values())

    dot = render_dot(g)
    assert len(_node_lines(dot)) == 9
    assert len(_edge_lines(dot)) == 8


def test_dependents_reverse_the_graph(hub, three_chain):
    apps, decks, data = three_chain
    g = ancestors(data[2], hub)
    for pallet_id in g.nodes:
        children = sorted({e.child for e in g.edges if e.parent == pallet_id})
        assert dependents(pallet_id, hub) == children


def test_max_depth(hub, three_chain):
    apps, decks, data = three_chain
    assert list(ancestors(data[2], hub, max_depth=0).nodes) == [data[2]]
    shallow = ancestors(data[2], hub, max_depth=1)
    assert set(shallow.nodes) == {data[2], data[1], apps[2], decks[2]}
    assert len(shallow.edges) == 3


def test_dangling_link_is_unresolved_leaf(tmp_path, hub, app_id):
    missing_deck = "e" * 64
    staging = pf.create_staging(tmp_path, deterministic=True)
    annotation = data_pallet_annotation(app_id, missing_deck, [], "true", "orphan", deterministic=True)
    orphan = hub.put(pf.seal(staging, annotation, tmp_path / "orphan.pallet"))

    g = ancestors(orphan, hub)

    assert g.nodes[missing_deck].resolved is False
    assert g.nodes[missing_deck].kind is None
    assert g.nodes[app_id].resolved is True
    assert any(missing_deck in d for d in g.diagnostics)
    assert 'style=dashed' in render_dot(g)


def test_corrupted_parent_is_unresolved(hub, work_dir, writer_spec, deck_id):
    output_id, _ = run_node(writer_spec, hub, work_dir=work_dir)
    stored = hub.object_path(deck_id)
    data = bytearray(stored.read_bytes())
    data[-3] ^= 0x10
    stored.write_bytes(bytes(data))

    g = ancestors(output_id, hub)
    assert g.nodes[deck_id].resolved is False
    assert g.diagnostics


def test_unknown_root(hub):
    with pytest.raises(PalletNotFoundError):
        ancestors("a" * 64, hub)


def test_render_dot_is_deterministic(hub, three_chain):
    _, _, data = three_chain
    first = render_dot(ancestors(data[2], hub))
    second = render_dot(ancestors(data[2], hub))
    assert first == second
    assert first.startswith("digraph ancestry {\n")
    assert first.endswith("}\n")
    assert f'label="data_pallet\\n{data[2][:12]}"' in first
    assert '[label="input_pallet"]' in first


def test_render_empty_graph():
    assert render_dot(AncestryGraph()) == "digraph ancestry {\n}\n"


def test_render_json_matches_schema(hub, three_chain):
    _, _, data = three_chain
    g = ancestors(data[2], hub)
    text = render_json(g)
    doc = json.loads(text)
    jsonschema.validate(doc, ANCESTRY_JSON_SCHEMA)
    assert doc["root"] == data[2]
    assert [n["id"] for n in doc["nodes"]] == sorted(n["id"] for n in doc["nodes"])
    assert len(doc["edges"]) == 8
    assert " " not in text


def test_cycle_is_reported():
    g = AncestryGraph(root="a" * 64)
    g.add_node("a" * 64, PalletKind.DATA_PALLET, "a", resolved=True)
    g.add_node("b" * 64, PalletKind.DATA_PALLET, "b", resolved=True)
    g.add_edge("a" * 64, "b" * 64, LinkType.INPUT_PALLET)
    g.add_edge("b" * 64, "a" * 64, LinkType.INPUT_PALLET)

    problems = g.check()

    assert not g.is_acyclic()
    assert len(problems) == 1
    assert g.diagnostics == problems
