"""Construction and training benchmarks on synthetic centroid layouts."""
from __future__ import annotations

import resource
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import hetgraph as hg
from . import model as M
from . import training as T

# roughly 3.9e5 nodes and 2.4e6 edges with the default graph radii
LARGE_LAYOUT = {"n_glom": 13400, "n_immune": 600_000, "spacing": 560.0}


def uniform_layout(n_glom: int, n_immune: int, spacing: float, seed: int = 0, n_classes: int = 3):
    """Uniform glomerulus and immune centroids with random features and labels.

    Only cells inside some glomerulus square survive detection, so the node
    count is below ``n_glom + n_immune``.
    """
    rng = np.random.default_rng(seed)
    side = spacing * np.sqrt(n_glom)
    glom_xy = rng.uniform(0, side, (n_glom, 2))
    cell_xy = rng.uniform(0, side, (n_immune, 2))
    is_m = rng.random(n_immune) < 0.5
    cells = {"m": (cell_xy[is_m], rng.random((int(is_m.sum()), 6))),
             "t": (cell_xy[~is_m], rng.random((int((~is_m).sum()), 6)))}
    labels = rng.integers(0, n_classes, n_glom)
    return glom_xy, rng.random((n_glom, 64)), cells, labels


@dataclass
class BenchRow:
    name: str
    nodes: int
    edges: int
    nodes_by_type: dict
    edges_by_type: dict
    construction_s: float
    peak_memory_bytes: int
    epoch_s: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def max_rss_bytes() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def epoch_seconds(g: hg.HeteroGraph, spec: M.ModelSpec | None = None, epochs: int = 2, seed: int = 0) -> float:
    """Wall seconds per training epoch (step plus validation pass) on one graph."""
    spec = spec or M.ModelSpec()
    task = T.make_task([g], "within", seed=seed, spec=spec)
    cfg = T.TrainConfig(max_epochs=epochs + 1, patience=epochs, seed=seed)
    t0 = time.perf_counter()
    res = T.fit(spec, task, cfg)
    return (time.perf_counter() - t0) / res.epochs_run


def bench_layout(name: str, layout, cfg: hg.GraphConfig | None = None, spec: M.ModelSpec | None = None,
                 epochs: int = 0) -> BenchRow:
    glom_xy, glom_x, cells, labels = layout
    g = hg.construct(glom_xy, glom_x, cells, labels, cfg, name, measure=True)
    st = hg.graph_stats(g)
    row = BenchRow(name, st.total_nodes, st.total_edges, st.nodes, st.edges,
                   g.meta["construction_seconds"], g.meta["peak_memory_bytes"])
    if epochs:
        row = replace(row, epoch_s=epoch_seconds(g, spec, epochs))
    return row


def bench_graph(g: hg.HeteroGraph, spec: M.ModelSpec | None = None, epochs: int = 0) -> BenchRow:
    """Row for an already built graph; construction numbers come from its metadata when present."""
    st = hg.graph_stats(g)
    row = BenchRow(g.name, st.total_nodes, st.total_edges, st.nodes, st.edges,
                   float(g.meta.get("construction_seconds", float("nan"))),
                   int(g.meta.get("peak_memory_bytes", -1)))
    if epochs:
        row = replace(row, epoch_s=epoch_seconds(g, spec, epochs))
    return row


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icept), r2


def scaling_layouts(edge_targets=(1e4, 3e4, 1e5, 3e5, 1e6), seed: int = 0):
    """Layouts whose edge counts land a few percent above ``edge_targets``.

    At this density a layout yields just under 4 edges per generated immune cell, so
    sizing with 3.8 keeps each target a lower bound.
    """
    out = []
    for k, target in enumerate(edge_targets):
        scale = target / LARGE_LAYOUT["n_immune"] / 3.8
        n_glom = max(int(round(LARGE_LAYOUT["n_glom"] * scale)), 4)
        n_imm = int(round(LARGE_LAYOUT["n_immune"] * scale))
        out.append((f"scale_{int(target):d}", uniform_layout(n_glom, n_imm, LARGE_LAYOUT["spacing"], seed + k)))
    return out


def format_table(rows: list[BenchRow]) -> str:
    head = f"{'graph':<20}{'nodes':>10}{'edges':>12}{'build_s':>10}{'peak_MB':>10}{'epoch_s':>10}"
    lines = [head]
    for r in rows:
        ep = f"{r.epoch_s:10.3f}" if r.epoch_s is not None else f"{'-':>10}"
        lines.append(f"{r.name:<20}{r.nodes:>10}{r.edges:>12}{r.construction_s:>10.2f}"
                     f"{r.peak_memory_bytes / 2**20:>10.1f}{ep}")
    return "\n".join(lines)
