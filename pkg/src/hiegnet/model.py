"""HIEGNet: relation-sum message passing over the glomerulus / immune-cell graph.

One layer computes, for every node ``v``,

    h'_v = sum over edge types r into type(v) with N_r(v) non-empty of U_r(h_v, M_r(v))

where ``M_r`` is one of the message kinds below and ``U_r`` is an MLP. Every
edge type owns its own parameters at every layer. Nodes with no contributing
relation get a zero vector.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from . import diffmath as dm
from .hetgraph import GLOM, HeteroGraph, edge_group, edge_name


class Kind(str, Enum):
    GCN = "GCN"
    SAGE = "SAGE"
    ESAGE = "ESAGE"
    GATV2 = "GATV2"
    GINE = "GINE"
    CFCONV = "CFCONV"


KINDS = tuple(k.value for k in Kind)


@dataclass
class ModelSpec:
    layers: int = 2
    hidden: int = 64
    dropout: float = 0.2
    kind_gg: str = "ESAGE"
    kind_ig: str = "GATV2"
    kind_i: str = "CFCONV"
    n_fc: int = 2
    jk: bool = False
    n_classes: int = 3
    in_dims: dict = field(default_factory=lambda: {"g": 64, "m": 6, "t": 6})
    node_types: tuple = ("g", "m", "t")
    leaky_slope: float = 0.2
    cf_delta: float = 0.01

    def __post_init__(self):
        self.node_types = tuple(self.node_types)
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.n_fc < 1:
            raise ValueError("n_fc must be >= 1")
        for k in (self.kind_gg, self.kind_ig, self.kind_i):
            if k not in KINDS:
                raise ValueError(f"unknown message passing kind {k!r}; choose from {KINDS}")
        missing = set(self.node_types) - set(self.in_dims)
        if missing:
            raise ValueError(f"in_dims lacks node types {sorted(missing)}")

    def kind_for(self, et: tuple[str, str]) -> str:
        return {"r_gg": self.kind_gg, "R_ig": self.kind_ig, "R_i": self.kind_i}[edge_group(et)]

    def edge_types(self) -> list[tuple[str, str]]:
        return [(a, b) for a in self.node_types for b in self.node_types]

    def dim(self, t: str, layer: int) -> int:
        return self.in_dims[t] if layer == 0 else self.hidden

    def head_in(self) -> int:
        if not self.jk:
            return self.hidden
        return self.in_dims[GLOM] + self.layers * self.hidden

    def to_dict(self) -> dict:
        d = asdict(self)
        d["node_types"] = list(self.node_types)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


class ParamStore(dict):
    """Trainable tensors keyed ``layer{l}/{edge type}/{role}`` plus ``head/W``, ``head/b``."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value for k, t in self.items()}

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self.items()}

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self):
            raise KeyError(f"checkpoint keys differ: {sorted(set(arrays) ^ set(self))[:5]}")
        for k, a in arrays.items():
            if a.shape != self[k].shape:
                raise ValueError(f"shape mismatch for {k}: {a.shape} vs {self[k].shape}")
            self[k].value = np.array(a, dtype=np.float64)


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def msg_dim(spec: ModelSpec, kind: str, d_src: int, d_dst: int) -> int:
    if kind in ("GCN", "SAGE", "CFCONV"):
        return d_src
    if kind == "GINE":
        return d_dst
    return spec.hidden


def init_params(spec: ModelSpec, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    P = ParamStore()

    def put(key, arr):
        P[key] = dm.Tensor(arr, requires_grad=True, name=key)

    H = spec.hidden
    for l in range(spec.layers):
        for et in spec.edge_types():
            s, d = spec.dim(et[0], l), spec.dim(et[1], l)
            kind = spec.kind_for(et)
            pre = f"layer{l}/{edge_name(et)}"
            if kind == "ESAGE":
                put(f"{pre}/W_nbr", _glorot(rng, s, H))
            elif kind == "GATV2":
                put(f"{pre}/W_src", _glorot(rng, s, H))
                put(f"{pre}/W_dst", _glorot(rng, d, H))
                put(f"{pre}/w_edge", _glorot(rng, 1, H))
                put(f"{pre}/att", _glorot(rng, H, 1))
            elif kind == "GINE":
                put(f"{pre}/W_nbr", _glorot(rng, s, d))
                put(f"{pre}/w_edge", _glorot(rng, 1, d))
                put(f"{pre}/eps", np.zeros((1, 1)))
            din = d if kind == "GINE" else d + msg_dim(spec, kind, s, d)
            for i in range(spec.n_fc):
                put(f"{pre}/U{i}_W", _glorot(rng, din if i == 0 else H, H))
                put(f"{pre}/U{i}_b", np.zeros((1, H)))
    put("head/W", _glorot(rng, spec.head_in(), spec.n_classes))
    put("head/b", np.zeros((1, spec.n_classes)))
    return P


# ---------------------------------------------------------------------------
# per-graph precomputation


@dataclass
class EdgeOps:
    """Fixed per-edge-type operators for one graph."""

    active: np.ndarray            # target positions with >= 1 neighbour
    src: np.ndarray               # edge sources
    dst_local: np.ndarray         # edge targets as index into ``active``
    dst: np.ndarray               # edge targets (node positions)
    e: np.ndarray                 # normalised distance feature, (E, 1)
    segs: dm.Segments             # grouping by dst_local
    mean: sp.csr_matrix           # (A, n_src) row-normalised adjacency
    gcn: sp.csr_matrix
    cf: sp.csr_matrix
    sum_: sp.csr_matrix
    att: tuple | None = None      # (src, dst_local, dst, e, segs) incl. self loops


@dataclass
class Prepared:
    graph: HeteroGraph
    x: dict[str, np.ndarray]
    ops: dict[tuple[str, str], EdgeOps]
    n: dict[str, int]
    cache: dict = field(default_factory=dict, repr=False)


def _restrict(op: EdgeOps, keep: np.ndarray) -> EdgeOps | None:
    """Keep only the targets ``active[keep]`` and their incoming edges."""
    rows = np.nonzero(keep)[0]
    if len(rows) == 0:
        return None
    remap = np.cumsum(keep) - 1
    em = keep[op.dst_local]
    dl = remap[op.dst_local[em]]
    att = None
    if op.att is not None:
        src, adl, dd, ee, _ = op.att
        am = keep[adl]
        adl = remap[adl[am]]
        att = (src[am], adl, dd[am], ee[am], dm.Segments(adl, len(rows)))
    return EdgeOps(op.active[rows], op.src[em], dl, op.dst[em], op.e[em], dm.Segments(dl, len(rows)),
                   op.mean[rows], op.gcn[rows], op.cf[rows], op.sum_[rows], att)


def receptive_field(spec: "ModelSpec", prep: Prepared, roots: np.ndarray) -> list[dict[str, np.ndarray]]:
    """Per layer, boolean masks of the nodes whose output is needed for the glomeruli ``roots``."""
    need = [dict() for _ in range(spec.layers)]
    cur = {t: np.zeros(prep.n[t], dtype=bool) for t in spec.node_types}
    cur[GLOM][np.asarray(roots, dtype=np.int64)] = True
    for l in range(spec.layers - 1, -1, -1):
        need[l] = cur
        prev = {t: m.copy() for t, m in cur.items()}
        for (a, b), op in prep.ops.items():
            if a in prev and b in cur:
                sel = cur[b][op.dst]
                prev[a][op.src[sel]] = True
        cur = prev
    return need


def restricted_ops(spec: "ModelSpec", prep: Prepared, roots: np.ndarray) -> list[dict]:
    """Per-layer edge operators cut down to the receptive field of ``roots`` (cached on ``prep``)."""
    roots = np.asarray(roots, dtype=np.int64)
    key = ("roots", spec.layers, roots.tobytes())
    hit = prep.cache.get(key)
    if hit is None:
        hit = []
        for mask in receptive_field(spec, prep, roots):
            ops = {}
            for (a, b), op in prep.ops.items():
                if b in mask:
                    r = _restrict(op, mask[b][op.active])
                    if r is not None:
                        ops[(a, b)] = r
            hit.append(ops)
        prep.cache[key] = hit
    return hit


def _edge_feature(g: HeteroGraph, et) -> np.ndarray:
    e = g.edges[et]
    if e.attr is not None:
        return e.attr
    # unscaled graph: normalise within this graph
    d = e.dist
    if len(d) == 0 or d.max() == d.min():
        return np.zeros_like(d)
    return (d - d.min()) / (d.max() - d.min())


def prepare(g: HeteroGraph, spec: ModelSpec | None = None) -> Prepared:
    delta = spec.cf_delta if spec is not None else 0.01
    n = {t: g.num_nodes(t) for t in g.node_types}
    ops = {}
    for et, es in g.edges.items():
        if len(es) == 0:
            continue
        a, b = et
        active, dst_local = np.unique(es.dst, return_inverse=True)
        na = len(active)
        attr = _edge_feature(g, et)
        ones = np.ones(len(es))
        shape = (na, n[a])
        sum_ = sp.csr_matrix((ones, (dst_local, es.src)), shape=shape)
        deg_t = np.bincount(dst_local, minlength=na).astype(np.float64)
        mean = sp.csr_matrix((1.0 / deg_t[dst_local], (dst_local, es.src)), shape=shape)
        deg_s = np.bincount(es.src, minlength=n[a]).astype(np.float64)
        w = 1.0 / np.sqrt((1.0 + deg_t[dst_local]) * (1.0 + deg_s[es.src]))
        gcn = sp.csr_matrix((w, (dst_local, es.src)), shape=shape)
        cf = sp.csr_matrix((1.0 / (attr + delta), (dst_local, es.src)), shape=shape)
        att = None
        if spec is None or spec.kind_for(et) == "GATV2":
            src, dl, dd, ee = es.src, dst_local, es.dst, attr
            if a == b:
                # self-inclusion for same-type relations, zero edge feature
                src = np.concatenate([src, active])
                dl = np.concatenate([dl, np.arange(na)])
                dd = np.concatenate([dd, active])
                ee = np.concatenate([ee, np.zeros(na)])
                o = np.lexsort((src, dl))
                src, dl, dd, ee = src[o], dl[o], dd[o], ee[o]
            att = (src, dl, dd, ee.reshape(-1, 1), dm.Segments(dl, na))
        ops[et] = EdgeOps(active, es.src, dst_local, es.dst, attr.reshape(-1, 1),
                          dm.Segments(dst_local, na), mean, gcn, cf, sum_, att)
    return Prepared(g, {t: g.x[t] for t in g.node_types}, ops, n)


# ---------------------------------------------------------------------------
# forward


def _mlp(P: ParamStore, pre: str, z: dm.Tensor, n_fc: int) -> dm.Tensor:
    for i in range(n_fc):
        z = dm.linear_relu(z, P[f"{pre}/U{i}_W"], P[f"{pre}/U{i}_b"])
    return z


def message(kind: str, P: ParamStore, pre: str, op: EdgeOps, h_src: dm.Tensor, h_dst: dm.Tensor,
            spec: ModelSpec, capture: dict | None = None) -> dm.Tensor:
    """Aggregated message for each active target of one edge type."""
    if kind == "SAGE":
        return dm.spmm(op.mean, h_src)
    if kind == "ESAGE":
        return dm.matmul(dm.spmm(op.mean, h_src), P[f"{pre}/W_nbr"])
    if kind == "GCN":
        return dm.spmm(op.gcn, h_src)
    if kind == "CFCONV":
        return dm.spmm(op.cf, h_src)
    if kind == "GINE":
        xs = dm.matmul(h_src, P[f"{pre}/W_nbr"])
        return dm.gine_sum(xs, P[f"{pre}/w_edge"], op.src, op.dst_local, op.e, len(op.active))
    if kind == "GATV2":
        src, dl, dd, e, segs = op.att
        xs = dm.matmul(h_src, P[f"{pre}/W_src"])
        xd = dm.matmul(h_dst, P[f"{pre}/W_dst"])
        score = dm.gatv2_scores(xs, xd, P[f"{pre}/w_edge"], P[f"{pre}/att"], src, dd, e, spec.leaky_slope)
        alpha = dm.segment_softmax(score, segs)
        if capture is not None:
            capture[f"{pre}/alpha"] = (alpha.value.reshape(-1).copy(), src.copy(), dd.copy())
        return dm.weighted_sum(alpha, xs, src, segs, segs.n)
    raise ValueError(f"unknown kind {kind!r}")


def needed_types(spec: ModelSpec, prep: Prepared) -> list[set[str]]:
    """Node types whose layer-``l`` output can reach the glomerulus head."""
    need = [set() for _ in range(spec.layers)]
    need[-1] = {GLOM}
    for l in range(spec.layers - 1, 0, -1):
        cur = set(need[l])
        for (a, b) in prep.ops:
            if b in need[l]:
                cur.add(a)
        need[l - 1] = cur
    return need


def layer(spec: ModelSpec, P: ParamStore, l: int, prep: Prepared, h: dict[str, dm.Tensor],
          capture: dict | None = None, targets: set[str] | None = None,
          ops: dict | None = None) -> dict[str, dm.Tensor]:
    """One relation-sum layer, before dropout; only ``targets`` types are computed when given.

    ``ops`` replaces ``prep.ops`` (see ``restricted_ops``); rows outside it are left at zero.
    """
    ops = prep.ops if ops is None else ops
    contrib: dict[str, list[tuple[dm.Tensor, np.ndarray]]] = {t: [] for t in spec.node_types}
    for et in spec.edge_types():
        op = ops.get(et)
        if op is None or (targets is not None and et[1] not in targets):
            continue
        a, b = et
        kind = spec.kind_for(et)
        pre = f"layer{l}/{edge_name(et)}"
        m = message(kind, P, pre, op, h[a], h[b], spec, capture)
        hv = dm.gather_rows(h[b], op.active)
        if kind == "GINE":
            z = dm.add(dm.add(hv, dm.mul(hv, P[f"{pre}/eps"])), m)
        else:
            z = dm.concat([hv, m], axis=1)
        u = _mlp(P, pre, z, spec.n_fc)
        contrib[b].append((u, op.active))
    out = {}
    for t in spec.node_types:
        if targets is not None and t not in targets:
            continue
        out[t] = dm.scatter_sum(contrib[t], prep.n[t], spec.hidden)
    return out


@dataclass
class Output:
    logits: np.ndarray
    probs: np.ndarray
    logits_t: dm.Tensor


def forward(spec: ModelSpec, P: ParamStore, prep: Prepared, train: bool = False,
            rng: np.random.Generator | None = None, capture: dict | None = None,
            roots: np.ndarray | None = None) -> Output:
    """Logits for every glomerulus; with ``roots`` only those rows are computed (others are garbage)."""
    for t in spec.node_types:
        if prep.x[t].shape[1] != spec.in_dims[t] and prep.n[t] > 0:
            raise ValueError(f"feature width for {t!r} is {prep.x[t].shape[1]}, spec expects {spec.in_dims[t]}")
    h = {t: dm.Tensor(prep.x[t].reshape(prep.n[t], spec.in_dims[t])) for t in spec.node_types}
    hist = [h[GLOM]]
    p = spec.dropout if train else 0.0
    if p > 0 and rng is None:
        raise ValueError("training-mode dropout needs an rng")
    need = None if capture is not None else needed_types(spec, prep)
    sub = restricted_ops(spec, prep, roots) if roots is not None else None
    for l in range(spec.layers):
        new = layer(spec, P, l, prep, h, capture, None if need is None else need[l],
                    None if sub is None else sub[l])
        if capture is not None:
            capture[f"layer{l}/pre_dropout"] = {t: v.value.copy() for t, v in new.items()}
        h = {t: dm.dropout(v, p, rng, train) for t, v in new.items()}
        hist.append(h[GLOM])
    z = dm.concat(hist, axis=1) if spec.jk else h[GLOM]
    logits = dm.add(dm.matmul(z, P["head/W"]), P["head/b"])
    return Output(logits.value, dm.softmax(logits.value), logits)


def predict(probs: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)


def save_checkpoint(path, spec: ModelSpec, P: ParamStore, extra: dict | None = None) -> None:
    dm.save_params(path, P.arrays(), {"spec": spec.to_dict(), **(extra or {})})


def load_checkpoint(path) -> tuple[ModelSpec, ParamStore, dict]:
    arrays, meta = dm.load_params(path)
    spec = ModelSpec.from_dict(meta.pop("spec"))
    P = init_params(spec, 0)
    P.load_arrays(arrays)
    return spec, P, meta
