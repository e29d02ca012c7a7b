"""
Native graph file format.

JSON, version 1::

    {"version": 1, "cutoff": 4.5, "rbf_count": 16,
     "vocab": ["H", "C", ...],
     "nodes": [{"element": "C", "pos": [x, y, z], "readout": false}, ...],
     "edges": [[src, dst], ...]}

Positions are authoritative: edges and edge features are recomputed on load.
The stored edge list is informational and only checked for structure.
Floats are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import ParseError
from .mol_graph import DEFAULT_RBF_COUNT, AtomRecord, ElementVocab, MolGraph, featurize

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def graph_to_dict(graph: MolGraph) -> dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "cutoff": graph.cutoff,
        "rbf_count": int(graph.rbf.shape[1]),
        "vocab": list(graph.vocab.symbols),
        "nodes": [
            {"element": atom.element, "pos": list(atom.position), "readout": atom.readout_tag}
            for atom in graph.atoms()
        ],
        "edges": [[int(s), int(d)] for s, d in zip(graph.src, graph.dst)],
    }


def dumps_graph(graph: MolGraph) -> str:
    return json.dumps(graph_to_dict(graph), indent=1)


def _require(doc: dict[str, Any], key: str, path: str) -> Any:
    if key not in doc:
        raise ParseError(f"missing key {key!r}", path=f"{path}/{key}")
    return doc[key]


def _real(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ParseError("expected a finite number", path=path)
    return float(value)


def graph_from_dict(doc: Any) -> MolGraph:
    """Validate a decoded document and rebuild the graph from its positions."""
    if not isinstance(doc, dict):
        raise ParseError("expected a JSON object", path="")
    version = _require(doc, "version", "")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported version {version!r}", path="/version")
    cutoff = _real(_require(doc, "cutoff", ""), "/cutoff")
    if cutoff <= 0:
        raise ParseError("cutoff must be positive", path="/cutoff")
    rbf_count = doc.get("rbf_count", DEFAULT_RBF_COUNT)
    if isinstance(rbf_count, bool) or not isinstance(rbf_count, int) or rbf_count < 2:
        raise ParseError("rbf_count must be an integer >= 2", path="/rbf_count")

    vocab_doc = _require(doc, "vocab", "")
    if not isinstance(vocab_doc, list) or not all(isinstance(s, str) for s in vocab_doc):
        raise ParseError("expected a list of element symbols", path="/vocab")

    nodes_doc = _require(doc, "nodes", "")
    if not isinstance(nodes_doc, list) or not nodes_doc:
        raise ParseError("expected a non-empty list of nodes", path="/nodes")
    atoms = []
    for i, node in enumerate(nodes_doc):
        path = f"/nodes/{i}"
        if not isinstance(node, dict):
            raise ParseError("expected an object", path=path)
        element = _require(node, "element", path)
        if not isinstance(element, str) or not element.strip():
            raise ParseError("expected a non-empty string", path=f"{path}/element")
        pos = _require(node, "pos", path)
        if not isinstance(pos, list) or len(pos) != 3:
            raise ParseError("expected 3 coordinates", path=f"{path}/pos")
        coords = tuple(_real(c, f"{path}/pos/{k}") for k, c in enumerate(pos))
        readout = node.get("readout", False)
        if not isinstance(readout, bool):
            raise ParseError("expected a boolean", path=f"{path}/readout")
        atoms.append(AtomRecord(element, coords, readout))

    edges_doc = _require(doc, "edges", "")
    if not isinstance(edges_doc, list) or not all(
        isinstance(e, list) and len(e) == 2 and all(isinstance(k, int) for k in e)
        for e in edges_doc
    ):
        raise ParseError("expected a list of [src, dst] pairs", path="/edges")

    graph = featurize(atoms, ElementVocab(tuple(vocab_doc)), cutoff, rbf_count)
    stored = np.array(edges_doc, dtype=np.intp).reshape(-1, 2)
    recomputed = np.stack([graph.src, graph.dst], axis=1)
    if stored.shape != recomputed.shape or not np.array_equal(stored, recomputed):
        logger.warning("Stored edge list disagrees with the positions; using recomputed edges")
    return graph


def loads_graph(text: str) -> MolGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", line=e.lineno) from e
    return graph_from_dict(doc)


def save_graph(graph: MolGraph, path: str | Path) -> None:
    Path(path).write_text(dumps_graph(graph), encoding="utf-8")


def load_graph(path: str | Path) -> MolGraph:
    return loads_graph(Path(path).read_text(encoding="utf-8"))
