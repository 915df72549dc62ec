"""SVG overlay of a tissue graph: nodes coloured by type, edges by group.

Edge colour saturation falls with edge length relative to the group's radius,
so short edges stand out.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .hetgraph import GLOM, HeteroGraph, edge_group

NODE_STYLE = {"g": ("#2e7d32", 10.0), "m": ("#c62828", 3.0), "t": ("#1565c0", 3.0)}
GROUP_HUE = {"r_gg": 280, "R_ig": 35, "R_i": 190}


def _saturation(length: float, scale: float) -> float:
    frac = min(max(length / scale, 0.0), 1.0) if scale > 0 else 0.0
    return 90.0 - 70.0 * frac


def render_svg(g: HeteroGraph, radii: dict[str, float] | None = None, width: float = 1000.0,
               title: str = "") -> str:
    radii = radii or {"r_gg": 138.6, "R_ig": 277.0, "R_i": 100.0}
    pts = np.concatenate([g.pos[t] for t in g.node_types if g.num_nodes(t)] or [np.zeros((1, 2))])
    lo = pts.min(axis=0) - 20
    hi = pts.max(axis=0) + 20
    span = np.maximum(hi - lo, 1.0)
    height = width * span[1] / span[0]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
           f'viewBox="{lo[0]:.3f} {lo[1]:.3f} {span[0]:.3f} {span[1]:.3f}">']
    if title:
        out.append(f"<title>{escape(title)}</title>")
    out.append('<g class="edges" stroke-width="1.5">')
    for et, e in g.edges.items():
        a, b = et
        grp = edge_group(et)
        hue = GROUP_HUE[grp]
        for s, d, dist in zip(e.src, e.dst, e.dist):
            if (a, int(s)) > (b, int(d)):
                continue  # draw each mirrored pair once
            x1, y1 = g.pos[a][s]
            x2, y2 = g.pos[b][d]
            sat = _saturation(float(dist), radii.get(grp, 1.0))
            out.append(f'<line class="edge {grp}" x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                       f'stroke="hsl({hue},{sat:.0f}%,45%)"/>')
    out.append("</g>")
    out.append('<g class="nodes">')
    for t in g.node_types:
        colour, r = NODE_STYLE.get(t, ("#555555", 3.0))
        for k, (x, y) in enumerate(g.pos[t]):
            extra = f' data-label="{int(g.y[k])}"' if t == GLOM else ""
            out.append(f'<circle class="node {t}" cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{colour}"{extra}/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
