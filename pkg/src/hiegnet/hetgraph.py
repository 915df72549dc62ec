"""Heterogeneous glomerulus / immune-cell graph: construction, scaling, I/O.

Edge ``(s, d)`` of type ``(src_type, dst_type)`` carries messages from node
``s`` of ``src_type`` to node ``d`` of ``dst_type``. Every edge is stored with
its mirror, so the graph is undirected in content. Node indices inside edge
lists are positions within the per-type node arrays.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
import time
import tracemalloc
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import morphology as morph
from . import spatial

log = logging.getLogger(__name__)

GLOM = "g"
DEFAULT_NODE_TYPES = ("g", "m", "t")
GROUPS = ("r_gg", "R_ig", "R_i")
UNLABELED = -1
CLASS_NAMES = ("healthy", "sclerotic", "dead")

FORMAT_NAME = "hiegnet-graph"
FORMAT_VERSION = 1
_BIN_MAGIC = b"HGFEAT\x00\x01"


class GraphError(ValueError):
    pass


class GraphFormatError(GraphError):
    """Unreadable graph file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def edge_name(et: tuple[str, str]) -> str:
    return f"r_{et[0]}{et[1]}"


def parse_edge_name(name: str) -> tuple[str, str]:
    if not name.startswith("r_") or len(name) != 4:
        raise GraphError(f"bad edge type name {name!r}")
    return name[2], name[3]


def edge_group(et: tuple[str, str]) -> str:
    n_glom = (et[0] == GLOM) + (et[1] == GLOM)
    return ("R_i", "R_ig", "r_gg")[n_glom]


def all_edge_types(node_types=DEFAULT_NODE_TYPES) -> list[tuple[str, str]]:
    return [(a, b) for a in node_types for b in node_types]


@dataclass
class GraphConfig:
    k: int = 5
    eps_immune: float = 100.0
    eps_immune_glom: float = 277.0
    eps_glom: float = 138.6
    square_side: float = 554.4


@dataclass
class EdgeSet:
    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray
    attr: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.src)

    @classmethod
    def empty(cls) -> "EdgeSet":
        return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0), np.empty(0))


@dataclass
class HeteroGraph:
    node_types: tuple[str, ...]
    ids: dict[str, np.ndarray]
    pos: dict[str, np.ndarray]
    x: dict[str, np.ndarray]
    edges: dict[tuple[str, str], EdgeSet]
    y: np.ndarray
    name: str = ""
    meta: dict = field(default_factory=dict)

    def num_nodes(self, t: str) -> int:
        return len(self.ids[t])

    def num_edges(self) -> int:
        return sum(len(e) for e in self.edges.values())

    def edge_types(self) -> list[tuple[str, str]]:
        return list(self.edges)

    def __eq__(self, other) -> bool:
        return isinstance(other, HeteroGraph) and graphs_equal(self, other)


@dataclass
class GraphStats:
    nodes: dict[str, int]
    edges: dict[str, int]
    construction_seconds: float | None = None
    peak_memory_bytes: int | None = None

    @property
    def total_nodes(self) -> int:
        return sum(self.nodes.values())

    @property
    def total_edges(self) -> int:
        return sum(self.edges.values())


# ---------------------------------------------------------------------------
# node detection


@dataclass
class NodeSet:
    """Detected nodes in final order; ``source`` maps back to the input position."""

    node_types: tuple[str, ...]
    pos: dict[str, np.ndarray]
    ids: dict[str, np.ndarray]
    source: dict[str, np.ndarray]


def select_in_squares(glom_xy: np.ndarray, cell_xy: np.ndarray, side: float) -> np.ndarray:
    """Boolean mask of cells inside at least one closed square of ``side`` around a glomerulus."""
    cell_xy = np.asarray(cell_xy, dtype=np.float64).reshape(-1, 2)
    glom_xy = np.asarray(glom_xy, dtype=np.float64).reshape(-1, 2)
    if len(cell_xy) == 0 or len(glom_xy) == 0:
        return np.zeros(len(cell_xy), dtype=bool)
    half = side / 2.0
    idx = spatial.build_index(glom_xy)
    d, j = idx.tree.query(cell_xy, k=1, p=np.inf)
    cand = np.isfinite(d) & (d <= half * (1 + 1e-9) + 1e-12)
    out = np.zeros(len(cell_xy), dtype=bool)
    c = np.nonzero(cand)[0]
    cheb = np.maximum(np.abs(cell_xy[c, 0] - glom_xy[j[c], 0]), np.abs(cell_xy[c, 1] - glom_xy[j[c], 1]))
    out[c] = cheb <= half
    return out


def detect_nodes(glom_xy: np.ndarray, cells: list[tuple[str, np.ndarray]] | dict[str, np.ndarray],
                 square_side: float = 554.4, node_types=DEFAULT_NODE_TYPES,
                 ids: dict[str, np.ndarray] | None = None) -> NodeSet:
    """Glomeruli become nodes; immune cells only when inside a glomerulus square.

    ``cells`` maps immune node type to an ``(n, 2)`` centroid array. A cell near
    several glomeruli is included once.
    """
    glom_xy = np.asarray(glom_xy, dtype=np.float64).reshape(-1, 2)
    if len(glom_xy) == 0:
        raise GraphError("at least one glomerulus is required")
    cells = dict(cells)
    pos, out_ids, source = {}, {}, {}
    for t in node_types:
        if t == GLOM:
            xy = glom_xy
            keep = np.arange(len(xy))
        else:
            xy = np.asarray(cells.get(t, np.empty((0, 2))), dtype=np.float64).reshape(-1, 2)
            keep = np.nonzero(select_in_squares(glom_xy, xy, square_side))[0]
        pos[t] = xy[keep]
        source[t] = keep
        given = None if ids is None else ids.get(t)
        out_ids[t] = keep.astype(np.int64) if given is None else np.asarray(given, dtype=np.int64)[keep]
    return NodeSet(tuple(node_types), pos, out_ids, source)


# ---------------------------------------------------------------------------
# edges


def _directed(pairs_a, types_a, local_a, pairs_b, types_b, local_b, d, out):
    """Add edges a->b to ``out`` grouped by (type_a, type_b)."""
    for ta in np.unique(types_a):
        for tb in np.unique(types_b):
            sel = (types_a == ta) & (types_b == tb)
            if not np.any(sel):
                continue
            out.setdefault((ta, tb), []).append((local_a[sel], local_b[sel], d[sel]))


def _finalise(parts: dict, edge_types) -> dict[tuple[str, str], EdgeSet]:
    res = {}
    for et in edge_types:
        chunks = parts.get(et)
        if not chunks:
            continue
        s = np.concatenate([c[0] for c in chunks]).astype(np.int64)
        t = np.concatenate([c[1] for c in chunks]).astype(np.int64)
        d = np.concatenate([c[2] for c in chunks])
        order = np.lexsort((s, t))
        res[et] = EdgeSet(s[order], t[order], d[order])
    return res


def build_edges_immune(nodes: NodeSet, k: int = 5, eps: float = 100.0) -> dict[tuple[str, str], EdgeSet]:
    """kNN (k) over the joint immune pool, edges longer than ``eps`` dropped, union-symmetrised."""
    imm = [t for t in nodes.node_types if t != GLOM]
    xy = np.concatenate([nodes.pos[t] for t in imm]) if imm else np.empty((0, 2))
    types = np.concatenate([np.full(len(nodes.pos[t]), t) for t in imm]) if imm else np.empty(0, "<U1")
    local = np.concatenate([np.arange(len(nodes.pos[t])) for t in imm]) if imm else np.empty(0, np.int64)
    n = len(xy)
    if n < 2:
        return {}
    idx = spatial.SpatialIndex(xy)
    nbr, dist = spatial.knn_all(idx, k)
    rows = np.repeat(np.arange(n), k)
    cols = nbr.ravel()
    keep = (cols >= 0) & (dist.ravel() <= eps)
    a = np.minimum(rows[keep], cols[keep])
    b = np.maximum(rows[keep], cols[keep])
    code = np.unique(a * n + b)
    a, b = code // n, code % n
    d = spatial._distances(xy[a], xy[b])
    parts: dict = {}
    _directed(a, types[a], local[a], b, types[b], local[b], d, parts)
    _directed(b, types[b], local[b], a, types[a], local[a], d, parts)
    return _finalise(parts, all_edge_types(nodes.node_types))


def build_edges_immune_glom(nodes: NodeSet, eps: float = 277.0) -> dict[tuple[str, str], EdgeSet]:
    """Every (glomerulus, immune cell) pair within ``eps``, in both directions."""
    g_idx = spatial.SpatialIndex(nodes.pos[GLOM])
    res = {}
    for t in nodes.node_types:
        if t == GLOM:
            continue
        c_idx = spatial.SpatialIndex(nodes.pos[t])
        gi, ci, d = spatial.cross_radius_pairs(g_idx, c_idx, eps)
        if len(gi) == 0:
            continue
        o = np.lexsort((ci, gi))
        res[(t, GLOM)] = EdgeSet(ci[o], gi[o], d[o])
        o = np.lexsort((gi, ci))
        res[(GLOM, t)] = EdgeSet(gi[o], ci[o], d[o])
    return res


def build_edges_glom(nodes: NodeSet, eps: float = 138.6) -> dict[tuple[str, str], EdgeSet]:
    """Glomerulus pairs within ``eps`` connected both ways."""
    i, j, d = spatial.radius_pairs(spatial.SpatialIndex(nodes.pos[GLOM]), eps)
    if len(i) == 0:
        return {}
    s = np.concatenate([i, j])
    t = np.concatenate([j, i])
    dd = np.concatenate([d, d])
    o = np.lexsort((s, t))
    return {(GLOM, GLOM): EdgeSet(s[o], t[o], dd[o])}


def build_all_edges(nodes: NodeSet, cfg: GraphConfig) -> dict[tuple[str, str], EdgeSet]:
    edges = {}
    edges.update(build_edges_immune(nodes, cfg.k, cfg.eps_immune))
    edges.update(build_edges_immune_glom(nodes, cfg.eps_immune_glom))
    edges.update(build_edges_glom(nodes, cfg.eps_glom))
    return edges


# ---------------------------------------------------------------------------
# assembly and validation


def assemble_graph(nodes: NodeSet, edges: dict[tuple[str, str], EdgeSet],
                   features: dict[str, np.ndarray], labels=None, name: str = "",
                   meta: dict | None = None) -> HeteroGraph:
    n_g = len(nodes.pos[GLOM])
    y = np.full(n_g, UNLABELED, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if y.shape != (n_g,):
        raise GraphError(f"labels shape {y.shape} != ({n_g},)")
    x = {}
    for t in nodes.node_types:
        f = np.asarray(features.get(t, np.zeros((len(nodes.pos[t]), 0))), dtype=np.float64)
        if f.ndim != 2 or len(f) != len(nodes.pos[t]):
            raise GraphError(f"features for {t!r} have shape {f.shape}, expected ({len(nodes.pos[t])}, d)")
        x[t] = f
    full = {et: edges.get(et, EdgeSet.empty()) for et in all_edge_types(nodes.node_types)}
    g = HeteroGraph(tuple(nodes.node_types), dict(nodes.ids), dict(nodes.pos), x, full, y, name, dict(meta or {}))
    validate(g)
    return g


def validate(g: HeteroGraph) -> None:
    for (a, b), e in g.edges.items():
        na, nb = g.num_nodes(a), g.num_nodes(b)
        if len(e) == 0:
            continue
        if e.src.min() < 0 or e.src.max() >= na or e.dst.min() < 0 or e.dst.max() >= nb:
            raise GraphError(f"dangling endpoint in {edge_name((a, b))}")
        if a == b and np.any(e.src == e.dst):
            raise GraphError(f"self-loop in {edge_name((a, b))}")
        code = e.src * max(nb, 1) + e.dst
        if len(np.unique(code)) != len(code):
            raise GraphError(f"duplicate edge in {edge_name((a, b))}")
    missing = mirror_defects(g)
    if missing:
        raise GraphError(f"{missing} edges lack a mirror")


def mirror_defects(g: HeteroGraph) -> int:
    """Number of edges without a reverse edge of equal distance."""
    bad = 0
    for (a, b), e in g.edges.items():
        r = g.edges.get((b, a), EdgeSet.empty())
        if len(e) != len(r):
            bad += abs(len(e) - len(r))
            continue
        nb = max(g.num_nodes(b), 1)
        fwd = e.src * nb + e.dst
        rev = r.dst * nb + r.src
        of, orv = np.argsort(fwd, kind="stable"), np.argsort(rev, kind="stable")
        same = (fwd[of] == rev[orv]) & (e.dist[of] == r.dist[orv])
        bad += int(np.count_nonzero(~same))
    return bad


def remove_edge_type_group(g: HeteroGraph, group: str) -> HeteroGraph:
    if group not in GROUPS:
        raise ValueError(f"unknown edge group {group!r}, expected one of {GROUPS}")
    edges = {et: (EdgeSet.empty() if edge_group(et) == group else e) for et, e in g.edges.items()}
    return replace(g, edges=edges)


def graph_stats(g: HeteroGraph) -> GraphStats:
    return GraphStats({t: g.num_nodes(t) for t in g.node_types},
                      {edge_name(et): len(e) for et, e in g.edges.items()},
                      g.meta.get("construction_seconds"), g.meta.get("peak_memory_bytes"))


def graphs_equal(a: HeteroGraph, b: HeteroGraph) -> bool:
    if a.node_types != b.node_types or a.name != b.name or not np.array_equal(a.y, b.y):
        return False
    for t in a.node_types:
        if not (np.array_equal(a.ids[t], b.ids[t]) and np.array_equal(a.pos[t], b.pos[t])
                and np.array_equal(a.x[t], b.x[t])):
            return False
    if set(a.edges) != set(b.edges):
        return False
    for et, e in a.edges.items():
        f = b.edges[et]
        if not (np.array_equal(e.src, f.src) and np.array_equal(e.dst, f.dst) and np.array_equal(e.dist, f.dist)):
            return False
        if (e.attr is None) != (f.attr is None) or (e.attr is not None and not np.array_equal(e.attr, f.attr)):
            return False
    return True


# ---------------------------------------------------------------------------
# construction pipeline


def construct(glom_xy, glom_x, cells: dict[str, tuple[np.ndarray, np.ndarray]], labels=None,
              cfg: GraphConfig | None = None, name: str = "", node_types=DEFAULT_NODE_TYPES,
              measure: bool = False) -> HeteroGraph:
    """Graph from precomputed centroids and raw features.

    ``cells`` maps immune type to ``(xy, features)`` for *all* candidate cells;
    selection by glomerulus square happens here.
    """
    cfg = cfg or GraphConfig()
    if measure:
        tracemalloc.start()
    t0 = time.perf_counter()
    nodes = detect_nodes(glom_xy, {t: v[0] for t, v in cells.items()}, cfg.square_side, node_types)
    feats = {GLOM: np.asarray(glom_x, dtype=np.float64)}
    for t in node_types:
        if t != GLOM:
            xy, f = cells.get(t, (np.empty((0, 2)), np.empty((0, len(morph.CELL_FEATURE_NAMES)))))
            f = np.asarray(f, dtype=np.float64)
            f = f.reshape(len(xy), -1) if len(xy) else f.reshape(0, f.shape[-1] if f.ndim == 2 else 0)
            feats[t] = f[nodes.source[t]]
    edges = build_all_edges(nodes, cfg)
    meta = {}
    g = assemble_graph(nodes, edges, feats, labels, name)
    if measure:
        meta["construction_seconds"] = time.perf_counter() - t0
        meta["peak_memory_bytes"] = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
    g.meta.update(meta)
    return g


def build_graph(glom_masks: list[morph.InstanceMask], gray, immune_cells: list[tuple[str, morph.InstanceMask]],
                labels=None, cfg: GraphConfig | None = None, name: str = "",
                node_types=DEFAULT_NODE_TYPES) -> HeteroGraph:
    """Full construction from masks: detection, feature extraction, edges (features unscaled)."""
    cfg = cfg or GraphConfig()
    t0 = time.perf_counter()
    glom_xy = np.array([m.centroid() for m in glom_masks], dtype=np.float64).reshape(-1, 2)
    by_type: dict[str, list[morph.InstanceMask]] = {t: [] for t in node_types if t != GLOM}
    for t, m in immune_cells:
        if m.pixel_count == 0:
            log.warning("skipping immune cell with empty mask")
            continue
        by_type.setdefault(t, []).append(m)
    cell_xy = {t: np.array([m.centroid() for m in ms], dtype=np.float64).reshape(-1, 2) for t, ms in by_type.items()}
    nodes = detect_nodes(glom_xy, cell_xy, cfg.square_side, node_types)
    # ``gray`` is one raster for all masks, or one patch per glomerulus
    patches = gray if isinstance(gray, (list, tuple)) else [gray] * len(glom_masks)
    feats = {GLOM: np.array([morph.glom_feature_vector(m, p) for m, p in zip(glom_masks, patches)]).reshape(
        len(glom_masks), len(morph.GLOM_FEATURE_NAMES))}
    for t in node_types:
        if t == GLOM:
            continue
        sel = nodes.source[t]
        inside = morph.inside_any(nodes.pos[t], glom_masks)
        rows = [morph.cell_feature_vector(by_type[t][s], inside[i]) for i, s in enumerate(sel)]
        feats[t] = np.array(rows).reshape(len(sel), len(morph.CELL_FEATURE_NAMES))
    edges = build_all_edges(nodes, cfg)
    g = assemble_graph(nodes, edges, feats, labels, name)
    g.meta["construction_seconds"] = time.perf_counter() - t0
    return g


# ---------------------------------------------------------------------------
# scaling (fit on training graphs only)


@dataclass
class GraphScaler:
    nodes: dict[str, morph.ScaleParams]
    edges: dict[str, tuple[float, float]]

    @classmethod
    def fit(cls, graphs: list[HeteroGraph], g_rows: list[np.ndarray | None] | None = None) -> "GraphScaler":
        """Node min/max per type and edge-distance min/max per edge type.

        ``g_rows`` optionally restricts which glomerulus rows of each graph take
        part in the fit (within-graph train/test splits).
        """
        g0 = graphs[0]
        nodes = {}
        for t in g0.node_types:
            blocks = []
            for i, g in enumerate(graphs):
                x = g.x[t]
                if t == GLOM and g_rows is not None and g_rows[i] is not None:
                    x = x[g_rows[i]]
                blocks.append(x)
            x = np.concatenate(blocks) if blocks else np.zeros((0, g0.x[t].shape[1]))
            if len(x) == 0:
                d = g0.x[t].shape[1]
                nodes[t] = morph.ScaleParams(np.zeros(d), np.zeros(d))
            else:
                nodes[t] = morph.fit_min_max(x)
        edges = {}
        for et in g0.edges:
            d = np.concatenate([g.edges[et].dist for g in graphs if et in g.edges])
            edges[edge_name(et)] = (float(d.min()), float(d.max())) if len(d) else (0.0, 0.0)
        return cls(nodes, edges)

    def apply(self, g: HeteroGraph) -> HeteroGraph:
        x = {t: self.nodes[t].transform(g.x[t]) if g.x[t].shape[1] else g.x[t] for t in g.node_types}
        edges = {}
        for et, e in g.edges.items():
            lo, hi = self.edges.get(edge_name(et), (0.0, 0.0))
            attr = (e.dist - lo) / (hi - lo) if hi > lo else np.zeros_like(e.dist)
            edges[et] = EdgeSet(e.src, e.dst, e.dist, attr)
        return replace(g, x=x, edges=edges, meta={**g.meta, "scaled": True})

    def to_dict(self) -> dict:
        return {"nodes": {t: p.to_dict() for t, p in self.nodes.items()},
                "edges": {k: list(v) for k, v in self.edges.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "GraphScaler":
        return cls({t: morph.ScaleParams.from_dict(p) for t, p in d["nodes"].items()},
                   {k: (float(v[0]), float(v[1])) for k, v in d["edges"].items()})


# ---------------------------------------------------------------------------
# serialisation


def _write_blocks(path: Path, blocks: list[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<I", len(blocks)))
        for b in blocks:
            cols = b.shape[1] if b.ndim == 2 else (b.size // b.shape[0] if b.shape[0] else 0)
            b = np.ascontiguousarray(b, dtype="<f8").reshape(b.shape[0], cols)
            fh.write(struct.pack("<QQ", b.shape[0], b.shape[1]))
            fh.write(b.tobytes())


def _read_blocks(path: Path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != _BIN_MAGIC:
        raise GraphFormatError(f"bad magic in feature companion {path.name}", 0)
    if len(buf) < 12:
        raise GraphFormatError("truncated block count", len(buf))
    (n,) = struct.unpack_from("<I", buf, 8)
    off = 12
    out = []
    for _ in range(n):
        if off + 16 > len(buf):
            raise GraphFormatError("truncated block header", off)
        r, c = struct.unpack_from("<QQ", buf, off)
        off += 16
        nbytes = r * c * 8
        if off + nbytes > len(buf):
            raise GraphFormatError(f"truncated block data ({r}x{c})", off)
        out.append(np.frombuffer(buf, dtype="<f8", count=r * c, offset=off).reshape(r, c).astype(np.float64))
        off += nbytes
    if off != len(buf):
        raise GraphFormatError("trailing bytes after last block", off)
    return out


def to_document(g: HeteroGraph, blocks: list[np.ndarray] | None = None) -> dict:
    """JSON-ready dict; with ``blocks`` given, feature matrices go there instead of inline."""
    nodes = {}
    for t in g.node_types:
        entry = {"ids": g.ids[t].tolist(), "pos": g.pos[t].tolist()}
        if blocks is None:
            entry["features"] = {"shape": list(g.x[t].shape), "data": g.x[t].ravel().tolist()}
        else:
            entry["features"] = {"shape": list(g.x[t].shape), "block": len(blocks)}
            blocks.append(g.x[t])
        nodes[t] = entry
    edges = {}
    for et, e in g.edges.items():
        edges[edge_name(et)] = {"src": e.src.tolist(), "dst": e.dst.tolist(), "dist": e.dist.tolist(),
                                "attr": None if e.attr is None else e.attr.tolist()}
    meta = {k: v for k, v in g.meta.items() if k not in ("construction_seconds", "peak_memory_bytes")}
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "name": g.name,
            "node_types": list(g.node_types), "labels": g.y.tolist(), "nodes": nodes,
            "edges": edges, "meta": meta}


def serialize(g: HeteroGraph, path, binary: bool = True) -> None:
    path = Path(path)
    blocks: list[np.ndarray] | None = [] if binary else None
    doc = to_document(g, blocks)
    if binary:
        doc["companion"] = path.with_suffix(".bin").name
        _write_blocks(path.with_suffix(".bin"), blocks)
    path.write_text(json.dumps(doc, separators=(",", ":")))


def from_document(doc: dict, blocks: list[np.ndarray] | None = None) -> HeteroGraph:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise GraphFormatError("not a hiegnet graph document (format field)", 0)
    if doc.get("version") != FORMAT_VERSION:
        raise GraphFormatError(f"unsupported graph format version {doc.get('version')!r}", 0)
    try:
        types = tuple(doc["node_types"])
        ids, pos, x = {}, {}, {}
        for t in types:
            nd = doc["nodes"][t]
            ids[t] = np.asarray(nd["ids"], dtype=np.int64)
            pos[t] = np.asarray(nd["pos"], dtype=np.float64).reshape(-1, 2)
            f = nd["features"]
            shape = tuple(f["shape"])
            if "block" in f:
                if blocks is None:
                    raise GraphFormatError("features reference a missing companion file", 0)
                x[t] = blocks[f["block"]].reshape(shape)
            else:
                x[t] = np.asarray(f["data"], dtype=np.float64).reshape(shape)
        edges = {}
        for name, e in doc["edges"].items():
            et = parse_edge_name(name)
            attr = None if e["attr"] is None else np.asarray(e["attr"], dtype=np.float64)
            edges[et] = EdgeSet(np.asarray(e["src"], dtype=np.int64), np.asarray(e["dst"], dtype=np.int64),
                                np.asarray(e["dist"], dtype=np.float64), attr)
        g = HeteroGraph(types, ids, pos, x, edges, np.asarray(doc["labels"], dtype=np.int64),
                        doc.get("name", ""), dict(doc.get("meta", {})))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, GraphFormatError):
            raise
        raise GraphFormatError(f"malformed graph document: {exc!r}", 0) from exc
    validate(g)
    return g


def deserialize(path) -> HeteroGraph:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.lstrip()[:1] == b"{":
        raise GraphFormatError("graph file does not start with a JSON object", 0)
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise GraphFormatError("graph file is not UTF-8", exc.start) from exc
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"invalid JSON: {exc.msg}", len(raw.decode("utf-8")[:exc.pos].encode())) from exc
    blocks = None
    if isinstance(doc, dict) and doc.get("companion"):
        blocks = _read_blocks(path.parent / doc["companion"])
    return from_document(doc, blocks)


# ---------------------------------------------------------------------------
# node CSV ingestion: id,type,x_um,y_um,mask_path,label

CSV_FIELDS = ("id", "type", "x_um", "y_um", "mask_path", "label")


def write_nodes_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in CSV_FIELDS})


def read_nodes_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise GraphError(f"node CSV header must be {','.join(CSV_FIELDS)}, got {reader.fieldnames}")
        rows = []
        for line, r in enumerate(reader, start=2):
            try:
                rows.append({"id": int(r["id"]), "type": r["type"], "x_um": float(r["x_um"]),
                             "y_um": float(r["y_um"]), "mask_path": r["mask_path"],
                             "label": int(r["label"]) if r["label"] not in ("", None) else UNLABELED})
            except (TypeError, ValueError) as exc:
                raise GraphError(f"{path}:{line}: {exc}") from exc
    return rows


def build_graph_from_csv(csv_path, gray, cfg: GraphConfig | None = None, name: str = "",
                         node_types=DEFAULT_NODE_TYPES) -> HeteroGraph:
    """Read masks listed in a node CSV and build the raw graph (node ids taken from the CSV)."""
    csv_path = Path(csv_path)
    rows = read_nodes_csv(csv_path)
    gl = [r for r in rows if r["type"] == GLOM]
    glom_masks = [morph.InstanceMask.load(csv_path.parent / r["mask_path"]) for r in gl]
    cells = [(r["type"], morph.InstanceMask.load(csv_path.parent / r["mask_path"]))
             for r in rows if r["type"] != GLOM]
    unknown = {r["type"] for r in rows} - set(node_types)
    if unknown:
        raise GraphError(f"node types {sorted(unknown)} not in {node_types}")
    g = build_graph(glom_masks, gray, cells, [r["label"] for r in gl], cfg, name, node_types)
    # replace positional ids with the CSV ids
    ids = {GLOM: np.array([r["id"] for r in gl], dtype=np.int64)}
    for t in node_types:
        if t != GLOM:
            all_ids = np.array([r["id"] for r in rows if r["type"] == t], dtype=np.int64)
            ids[t] = all_ids[g.ids[t]] if len(g.ids[t]) else np.empty(0, np.int64)
    g.ids = ids
    return g
