"""Synthetic slides with planted, configurable relational signal.

Each glomerulus has a true label and an *appearance* label. Shape and texture
follow the appearance label, which equals the true label except with
probability ``appearance_noise``. The immune neighbourhood (T-cell count and
T-cell size) follows the true label in the relational modes, so it is only
reachable through glomerulus-immune edges. In ``neighbor_class`` mode
glomeruli additionally come in tight clusters whose labels are correlated.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import hetgraph as hg
from . import morphology as morph
from . import pnm

log = logging.getLogger(__name__)

MODES = ("none", "immune_density", "neighbor_class")
EXC_PRIORS = (1326 / 2050, 417 / 2050, 307 / 2050)


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_glomeruli: int = 500
    field_um: float | None = None            # square side; derived from density when None
    priors: tuple = (0.646, 0.203, 0.151)
    relational_mode: str = "immune_density"
    min_spacing_um: float = 300.0            # Poisson-disc spacing of glomeruli (or clusters)
    cluster_size: int | None = None          # None: 3 in neighbor_class mode, else 1
    cluster_radius_um: tuple = (66.0, 76.0)  # member distance from the cluster centre
    cluster_label_corr: float = 0.85         # P(member label = cluster label)
    appearance_noise: float = 0.1
    t_rate: tuple = (6.0, 18.0, 0.5)         # mean T-cells per glomerulus by true class
    m_rate: float = 5.0
    t_radius_um: tuple = ((3.0, 4.5), (5.0, 6.5), (3.0, 4.5))
    m_radius_um: tuple = (4.0, 6.0)
    immune_ring_um: float = 200.0
    background_per_mm2: float = 2.0
    texture_sigma: tuple = ((0.6, 1.0), (1.6, 2.4), (3.5, 5.0))
    texture_contrast: tuple = (40.0, 40.0, 12.0)
    noise_level: float = 4.0
    resolution: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.priors = tuple(float(p) for p in self.priors)
        if self.relational_mode not in MODES:
            raise SynthError(f"relational_mode must be one of {MODES}")
        if abs(sum(self.priors) - 1.0) > 1e-6 or len(self.priors) != 3 or min(self.priors) < 0:
            raise SynthError(f"priors must be 3 non-negative numbers summing to 1, got {self.priors}")
        if self.n_glomeruli < 1:
            raise SynthError("n_glomeruli must be >= 1")
        if not 0 <= self.appearance_noise < 1:
            raise SynthError("appearance_noise must be in [0, 1)")

    @property
    def k_cluster(self) -> int:
        if self.cluster_size is not None:
            return int(self.cluster_size)
        return 3 if self.relational_mode == "neighbor_class" else 1

    def side(self) -> float:
        if self.field_um is not None:
            return float(self.field_um)
        units = math.ceil(self.n_glomeruli / self.k_cluster)
        return self.min_spacing_um * math.sqrt(1.8 * units) + 2 * self.min_spacing_um

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GlomRecord:
    mask: morph.InstanceMask
    patch: np.ndarray          # uint8 gray values over the mask raster
    label: int
    appearance: int
    cluster: int


@dataclass
class CellRecord:
    kind: str                  # "m" or "t"
    mask: morph.InstanceMask
    parent: int                # generating glomerulus, -1 for background


@dataclass
class SyntheticSlide:
    config: SynthConfig
    side_um: float
    gloms: list[GlomRecord]
    cells: list[CellRecord]
    meta: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.gloms], dtype=np.int64)

    @property
    def glom_xy(self) -> np.ndarray:
        return np.array([g.mask.centroid() for g in self.gloms]).reshape(-1, 2)

    def cell_xy(self, kind: str | None = None) -> np.ndarray:
        return np.array([c.mask.centroid() for c in self.cells if kind is None or c.kind == kind]).reshape(-1, 2)

    def raster_shape(self) -> tuple[int, int]:
        n = int(math.ceil(self.side_um / self.config.resolution))
        return n, n

    def gray_raster(self) -> morph.Raster:
        """Luminance channel: flat background with each glomerulus texture pasted on its mask plus a 1-px ring."""
        img = np.full(self.raster_shape(), 200, dtype=np.uint8)
        for g in self.gloms:
            i0, j0 = _pix(g.mask.origin, self.config.resolution)
            region = ndimage.binary_dilation(g.mask.bitmap, structure=np.ones((3, 3), bool))
            _paste(img, i0, j0, g.patch, region)
        return morph.Raster(img, (0.0, 0.0), self.config.resolution)

    def stain_raster(self, kind: str, seed: int | None = None) -> morph.Raster:
        """Immune-stain channel: noisy background with bright cell disks of one type."""
        rng = np.random.default_rng(self.config.seed + 17 if seed is None else seed)
        shape = self.raster_shape()
        img = np.clip(rng.normal(25, self.config.noise_level * 2, size=shape), 0, 255)
        for c in self.cells:
            if c.kind != kind:
                continue
            i0, j0 = _pix(c.mask.origin, self.config.resolution)
            val = np.full(c.mask.bitmap.shape, 190.0)
            _paste(img, i0, j0, val, c.mask.bitmap)
        return morph.Raster(np.round(img).astype(np.uint8), (0.0, 0.0), self.config.resolution)

    def to_graph(self, cfg: hg.GraphConfig | None = None, name: str = "") -> hg.HeteroGraph:
        """Build the raw (unscaled) graph straight from the generation record."""
        return hg.build_graph([g.mask for g in self.gloms], [g.patch for g in self.gloms],
                              [(c.kind, c.mask) for c in self.cells], self.labels, cfg, name)

    def write(self, out_dir, rasters: bool = True, stains: bool = False) -> Path:
        """Masks (PGM + sidecar), node CSV, gray raster and generation record under ``out_dir``."""
        out = Path(out_dir)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        rows = []
        nid = 0
        for k, g in enumerate(self.gloms):
            rel = f"masks/g_{k:05d}.pgm"
            g.mask.save(out / rel)
            x, y = g.mask.centroid()
            rows.append({"id": nid, "type": "g", "x_um": repr(float(x)), "y_um": repr(float(y)), "mask_path": rel,
                         "label": g.label})
            nid += 1
        for k, c in enumerate(self.cells):
            rel = f"masks/{c.kind}_{k:06d}.pgm"
            c.mask.save(out / rel)
            x, y = c.mask.centroid()
            rows.append({"id": nid, "type": c.kind, "x_um": repr(float(x)), "y_um": repr(float(y)), "mask_path": rel,
                         "label": ""})
            nid += 1
        hg.write_nodes_csv(out / "nodes.csv", rows)
        if rasters:
            r = self.gray_raster()
            pnm.write_pgm(out / "gray.pgm", r.data)
            pnm.write_sidecar(out / "gray.pgm", r.origin, r.resolution)
        if stains:
            for kind in ("m", "t"):
                r = self.stain_raster(kind)
                pnm.write_pgm(out / f"stain_{kind}.pgm", r.data)
                pnm.write_sidecar(out / f"stain_{kind}.pgm", r.origin, r.resolution)
        record = {"config": self.config.to_dict(), "side_um": self.side_um,
                  "appearance": [g.appearance for g in self.gloms], "cluster": [g.cluster for g in self.gloms],
                  "cell_parent": [c.parent for c in self.cells]}
        (out / "truth.json").write_text(json.dumps(record, indent=1))
        return out


def _pix(origin, res) -> tuple[int, int]:
    return int(round(origin[1] / res)), int(round(origin[0] / res))


def _paste(img: np.ndarray, i0: int, j0: int, patch: np.ndarray, where: np.ndarray) -> None:
    H, W = img.shape
    h, w = patch.shape
    a0, b0 = max(i0, 0), max(j0, 0)
    a1, b1 = min(i0 + h, H), min(j0 + w, W)
    if a1 <= a0 or b1 <= b0:
        return
    sub = (slice(a0 - i0, a1 - i0), slice(b0 - j0, b1 - j0))
    view = img[a0:a1, b0:b1]
    sel = where[sub]
    view[sel] = patch[sub][sel]


# ---------------------------------------------------------------------------
# placement


def poisson_disc(n: int, side: float, spacing: float, rng: np.random.Generator,
                 margin: float = 0.0, max_tries: int | None = None) -> np.ndarray:
    """Dart throwing on a hash grid: ``n`` points at least ``spacing`` apart."""
    cell = spacing / math.sqrt(2)
    g = int(math.ceil(side / cell)) + 1
    grid = -np.ones((g, g), dtype=np.int64)
    pts = []
    tries = 0
    max_tries = max_tries or 200 * n + 1000
    lo, hi = margin, side - margin
    if hi <= lo:
        raise SynthError("field too small for the margin")
    while len(pts) < n:
        tries += 1
        if tries > max_tries:
            raise SynthError(f"field of {side:.0f} um is too small to place {n} glomeruli at "
                             f"{spacing:.0f} um spacing (placed {len(pts)})")
        p = rng.uniform(lo, hi, size=2)
        gi, gj = int(p[1] / cell), int(p[0] / cell)
        ok = True
        for a in range(max(gi - 2, 0), min(gi + 3, g)):
            for b in range(max(gj - 2, 0), min(gj + 3, g)):
                k = grid[a, b]
                if k >= 0 and math.hypot(pts[k][0] - p[0], pts[k][1] - p[1]) < spacing:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            grid[gi, gj] = len(pts)
            pts.append(p)
    return np.array(pts).reshape(-1, 2)


def ellipse_mask(cx: float, cy: float, a: float, b: float, theta: float, res: float = 1.0) -> morph.InstanceMask:
    """Rasterised filled ellipse (semi-axes in um) with a 1-px empty margin."""
    r = max(a, b)
    x0 = math.floor((cx - r) / res) - 1
    y0 = math.floor((cy - r) / res) - 1
    n = int(math.ceil(2 * r / res)) + 3
    jj, ii = np.meshgrid(np.arange(n), np.arange(n))
    px = (x0 + jj + 0.5) * res - cx
    py = (y0 + ii + 0.5) * res - cy
    c, s = math.cos(theta), math.sin(theta)
    u = c * px + s * py
    v = -s * px + c * py
    bm = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if not bm.any():
        bm[n // 2, n // 2] = True
    return morph.InstanceMask(bm, (x0 * res, y0 * res), res)


def _texture(shape, sigma: float, contrast: float, rng) -> np.ndarray:
    z = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="reflect")
    z = z / (z.std() + 1e-12)
    return np.clip(np.round(128 + contrast * z), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# generation


def _labels(cfg: SynthConfig, n_units: int, rng) -> tuple[np.ndarray, np.ndarray]:
    k = cfg.k_cluster
    unit_lab = rng.choice(3, size=n_units, p=cfg.priors)
    lab, clus = [], []
    for u in range(n_units):
        for _ in range(k):
            if k > 1 and rng.random() >= cfg.cluster_label_corr:
                lab.append(int(rng.choice(3, p=cfg.priors)))
            else:
                lab.append(int(unit_lab[u]))
            clus.append(u)
    return np.array(lab[:cfg.n_glomeruli]), np.array(clus[:cfg.n_glomeruli])


def _appearance(label: int, q: float, rng) -> int:
    if rng.random() < q:
        return int(rng.choice([c for c in range(3) if c != label]))
    return label


_SHAPE = {  # appearance class -> (semi-major range, minor/major ratio range), um
    0: ((42.0, 50.0), (0.86, 0.97)),
    1: ((44.0, 54.0), (0.58, 0.70)),
    2: ((28.0, 36.0), (0.80, 0.94)),
}


def generate(cfg: SynthConfig) -> SyntheticSlide:
    rng = np.random.default_rng(cfg.seed)
    side = cfg.side()
    k = cfg.k_cluster
    n_units = math.ceil(cfg.n_glomeruli / k)
    margin = cfg.cluster_radius_um[1] + 60.0 if k > 1 else 60.0
    centres = poisson_disc(n_units, side, cfg.min_spacing_um, rng, margin=margin)
    labels, clusters = _labels(cfg, n_units, rng)
    res = cfg.resolution

    gloms: list[GlomRecord] = []
    phase = 0.0
    for idx in range(cfg.n_glomeruli):
        u = clusters[idx]
        cx, cy = centres[u]
        if k > 1:
            slot = idx % k
            if slot == 0:
                phase = rng.uniform(0, 2 * math.pi)
            rad = rng.uniform(*cfg.cluster_radius_um)
            ang = phase + 2 * math.pi * slot / k
            cx, cy = cx + rad * math.cos(ang), cy + rad * math.sin(ang)
        app = _appearance(int(labels[idx]), cfg.appearance_noise, rng)
        (alo, ahi), (rlo, rhi) = _SHAPE[app]
        a = rng.uniform(alo, ahi)
        b = a * rng.uniform(rlo, rhi)
        mask = ellipse_mask(cx, cy, a, b, rng.uniform(0, math.pi), res)
        sig = rng.uniform(*cfg.texture_sigma[app]) / res
        patch = _texture(mask.bitmap.shape, sig, cfg.texture_contrast[app], rng)
        gloms.append(GlomRecord(mask, patch, int(labels[idx]), app, int(u)))

    cells: list[CellRecord] = []
    relational = cfg.relational_mode != "none"
    t_mean = float(np.dot(cfg.priors, cfg.t_rate))

    def place(kind, n, cx, cy, radius_range, parent):
        for _ in range(n):
            for _attempt in range(20):
                d = cfg.immune_ring_um * math.sqrt(rng.random())
                ang = rng.uniform(0, 2 * math.pi)
                x, y = cx + d * math.cos(ang), cy + d * math.sin(ang)
                if 0 <= x < side and 0 <= y < side:
                    break
            else:
                continue
            r = rng.uniform(*radius_range)
            cells.append(CellRecord(kind, ellipse_mask(x, y, r, r, 0.0, res), parent))

    for idx, g in enumerate(gloms):
        cx, cy = g.mask.centroid()
        c = g.label
        n_t = rng.poisson(cfg.t_rate[c] if relational else t_mean)
        place("t", n_t, cx, cy, cfg.t_radius_um[c] if relational else cfg.t_radius_um[0], idx)
        place("m", rng.poisson(cfg.m_rate), cx, cy, cfg.m_radius_um, idx)
    n_bg = rng.poisson(cfg.background_per_mm2 * (side / 1000.0) ** 2)
    for _ in range(n_bg):
        kind = "t" if rng.random() < 0.5 else "m"
        x, y = rng.uniform(0, side, size=2)
        r = rng.uniform(*(cfg.t_radius_um[0] if kind == "t" else cfg.m_radius_um))
        cells.append(CellRecord(kind, ellipse_mask(x, y, r, r, 0.0, res), -1))
    return SyntheticSlide(cfg, side, gloms, cells)


def immune_counts(slide: SyntheticSlide, kind: str = "t", radius: float = 277.0) -> np.ndarray:
    """Number of ``kind`` cells whose centroid lies within ``radius`` of each glomerulus centroid."""
    from . import spatial

    xy = slide.cell_xy(kind)
    if len(xy) == 0:
        return np.zeros(len(slide.gloms), dtype=np.int64)
    gi, _, _ = spatial.cross_radius_pairs(spatial.SpatialIndex(slide.glom_xy), spatial.SpatialIndex(xy), radius)
    return np.bincount(gi, minlength=len(slide.gloms))
