"""
Граф происхождения: обход ссылок аннотаций через hub и его вывод в DOT/JSON
"""
import logging
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Set

import networkx as nx

from annotations import LinkType, PalletKind, antecedent_links, canonical_json
from hub import Hub
from resilience import AnnotationError, CorruptionError, PalletNotFoundError

logger = logging.getLogger(__name__)

SHORT_ID = 12

ANCESTRY_JSON_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["root", "nodes", "edges", "diagnostics"],
    "additionalProperties": False,
    "properties": {
        "root": {"type": ["string", "null"], "pattern": "^[0-9a-f]{64}$"},
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "kind", "node_name", "resolved"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                    "kind": {"enum": [k.value for k in PalletKind] + [None]},
                    "node_name": {"type": "string"},
                    "resolved": {"type": "boolean"},
                },
            },
        },
        "edges": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["child", "parent", "link"],
                "additionalProperties": False,
                "properties": {
                    "child": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                    "parent": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                    "link": {"enum": [link.value for link in LinkType]},
                },
            },
        },
        "diagnostics": {"type": "array", "items": {"type": "string"}},
    },
}


@dataclass(frozen=True)
class AncestryNode:
    kind: Optional[PalletKind]
    node_name: str
    resolved: bool


@dataclass(frozen=True)
class AncestryEdge:
    child: str
    parent: str
    link: LinkType

    def sort_key(self):
        return self.child, self.parent, self.link.value


class AncestryGraph:
    """Паллеты и ссылки между ними; ребро идет от потомка к предшественнику"""

    def __init__(self, root: Optional[str] = None):
        self.root = root
        self.graph = nx.MultiDiGraph()
        self.diagnostics: List[str] = []

    def add_node(self, pallet_id: str, kind: Optional[PalletKind], node_name: str, resolved: bool) -> None:
        self.graph.add_node(pallet_id, info=AncestryNode(kind, node_name, resolved))

    def add_edge(self, child: str, parent: str, link: LinkType) -> None:
        self.graph.add_edge(child, parent, key=link.value, link=link)

    @property
    def nodes(self) -> Dict[str, AncestryNode]:
        return {pallet_id: self.graph.nodes[pallet_id]["info"] for pallet_id in sorted(self.graph.nodes)}

    @property
    def edges(self) -> Set[AncestryEdge]:
        return {AncestryEdge(child, parent, data["link"]) for child, parent, data in self.graph.edges(data=True)}

    def sorted_edges(self) -> List[AncestryEdge]:
        return sorted(self.edges, key=AncestryEdge.sort_key)

    def is_acyclic(self) -> bool:
        return nx.is_directed_acyclic_graph(self.graph)

    def check(self) -> List[str]:
        """Инварианты графа; нарушения добавляются в diagnostics"""
        problems = []
        for child, parent in self.graph.edges():
            for endpoint in (child, parent):
                if "info" not in self.graph.nodes[endpoint]:
                    problems.append(f"ребро ссылается на отсутствующий узел {endpoint}")
        if not self.is_acyclic():
            cycle = nx.find_cycle(self.graph)
            problems.append(f"цикл в графе происхождения (hub поврежден): {[edge[0][:SHORT_ID] for edge in cycle]}")
        for problem in problems:
            if problem not in self.diagnostics:
                logger.error(problem)
                self.diagnostics.append(problem)
        return problems


def _resolve(hub: Hub, pallet_id: str, graph: AncestryGraph):
    """Аннотация паллеты или None; нерешенный узел попадает в граф листом"""
    if not hub.contains(pallet_id):
        graph.add_node(pallet_id, None, "", resolved=False)
        graph.diagnostics.append(f"висячая ссылка: {pallet_id} отсутствует в hub")
        return None
    try:
        annotation = hub.read_annotation(pallet_id)
    except (CorruptionError, AnnotationError) as e:
        graph.add_node(pallet_id, None, "", resolved=False)
        graph.diagnostics.append(f"паллета {pallet_id} не читается: {e}")
        return None
    graph.add_node(pallet_id, annotation.kind, annotation.node_name, resolved=True)
    return annotation


def ancestors(pallet_id: str, hub: Hub, max_depth: Optional[int] = None) -> AncestryGraph:
    """
    Обход в ширину по ссылкам аннотаций.

    Args:
        pallet_id: Корень обхода, обязан быть в hub
        hub: Hub, в котором ищутся предшественники
        max_depth: Глубина обхода; None - без ограничения
    """
    if not hub.contains(pallet_id):
        raise PalletNotFoundError(pallet_id)
    graph = AncestryGraph(root=pallet_id)
    hub.read_annotation(pallet_id)

    queue = deque([(pallet_id, 0)])
    visited = {pallet_id}
    while queue:
        current, depth = queue.popleft()
        annotation = _resolve(hub, current, graph)
        if annotation is None or (max_depth is not None and depth >= max_depth):
            continue
        for parent, link in antecedent_links(annotation):
            graph.add_edge(current, parent, link)
            if parent not in visited:
                visited.add(parent)
                queue.append((parent, depth + 1))

    graph.check()
    logger.debug(f"Граф происхождения {pallet_id[:SHORT_ID]}: {graph.graph.number_of_nodes()} узлов")
    return graph


def dependents(pallet_id: str, hub: Hub) -> List[str]:
    """Все паллеты hub, чьи аннотации ссылаются на pallet_id (полный проход)"""
    found = []
    for candidate, annotation in hub.iter_annotations():
        if any(parent == pallet_id for parent, _ in antecedent_links(annotation)):
            found.append(candidate)
    return sorted(found)


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def render_dot(g: AncestryGraph) -> str:
    lines = ["digraph ancestry {"]
    for pallet_id, node in g.nodes.items():
        kind = node.kind.value if node.kind else "unresolved"
        label = f'"{kind}\\n{pallet_id[:SHORT_ID]}"'
        style = "" if node.resolved else ", style=dashed"
        lines.append(f"  {_dot_quote(pallet_id)} [label={label}{style}];")
    for edge in g.sorted_edges():
        lines.append(f"  {_dot_quote(edge.child)} -> {_dot_quote(edge.parent)} [label={_dot_quote(edge.link.value)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_document(g: AncestryGraph) -> dict:
    return {
        "root": g.root,
        "nodes": [
            {
                "id": pallet_id,
                "kind": node.kind.value if node.kind else None,
                "node_name": node.node_name,
                "resolved": node.resolved,
            }
            for pallet_id, node in g.nodes.items()
        ],
        "edges": [
            {"child": e.child, "parent": e.parent, "link": e.link.value}
            for e in g.sorted_edges()
        ],
        "diagnostics": list(g.diagnostics),
    }


def render_json(g: AncestryGraph) -> str:
    return canonical_json(to_document(g)).decode("utf-8")
