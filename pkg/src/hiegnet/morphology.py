"""Mask ingestion, shape and texture features, and the threshold segmenter.

Raster conventions: row ``i``, column ``j`` of a raster with origin ``(ox, oy)``
(micrometres, top-left corner) and resolution ``res`` covers the square
``[ox + j*res, ox + (j+1)*res) x [oy + i*res, oy + (i+1)*res)``; y grows downward.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import pnm

log = logging.getLogger(__name__)

N_LBP_BINS = 59
GLOM_FEATURE_NAMES = tuple(f"lbp_{i:02d}" for i in range(N_LBP_BINS)) + (
    "area", "perimeter", "eccentricity", "circularity", "aspect_ratio")
CELL_FEATURE_NAMES = ("area", "perimeter", "eccentricity", "circularity", "aspect_ratio",
                      "inside_glomerulus")

# Kulpa's correction for the length of an 8-connected chain
_KULPA = math.pi * (1.0 + math.sqrt(2.0)) / 8.0
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class Raster:
    data: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)
    resolution: float = 1.0

    @classmethod
    def load(cls, path) -> "Raster":
        img = pnm.read_pgm(path) if Path(path).suffix.lower() != ".ppm" else luminance(
            pnm.decode_pnm(Path(path).read_bytes()))
        try:
            origin, res = pnm.read_sidecar(path)
        except FileNotFoundError:
            origin, res = (0.0, 0.0), 1.0
        return cls(np.asarray(img, dtype=np.float64), origin, res)


def luminance(rgb: np.ndarray) -> np.ndarray:
    # integer weights keep gray input (R == G == B) exact, so LBP ties survive
    rgb = np.asarray(rgb, dtype=np.float64)
    return (299.0 * rgb[..., 0] + 587.0 * rgb[..., 1] + 114.0 * rgb[..., 2]) / 1000.0


@dataclass
class InstanceMask:
    bitmap: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)
    resolution: float = 1.0

    def __post_init__(self):
        self.bitmap = np.asarray(self.bitmap, dtype=bool)
        if self.bitmap.ndim != 2:
            raise ValueError(f"mask bitmap must be 2-D, got shape {self.bitmap.shape}")
        if not self.resolution > 0:
            raise ValueError("resolution must be > 0")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def pixel_count(self) -> int:
        return int(self.bitmap.sum())

    def centroid(self) -> tuple[float, float]:
        rows, cols = np.nonzero(self.bitmap)
        if len(rows) == 0:
            raise ValueError("empty mask has no centroid")
        ox, oy = self.origin
        return (ox + (cols.mean() + 0.5) * self.resolution,
                oy + (rows.mean() + 0.5) * self.resolution)

    def bbox_um(self) -> tuple[float, float, float, float]:
        h, w = self.bitmap.shape
        ox, oy = self.origin
        return ox, oy, ox + w * self.resolution, oy + h * self.resolution

    def contains(self, x: float, y: float) -> bool:
        j = math.floor((x - self.origin[0]) / self.resolution)
        i = math.floor((y - self.origin[1]) / self.resolution)
        h, w = self.bitmap.shape
        return 0 <= i < h and 0 <= j < w and bool(self.bitmap[i, j])

    def save(self, path) -> None:
        pnm.write_pgm(path, self.bitmap)
        pnm.write_sidecar(path, self.origin, self.resolution)

    @classmethod
    def load(cls, path) -> "InstanceMask":
        img = pnm.read_pgm(path)
        origin, res = pnm.read_sidecar(path)
        return cls(img > 0, origin, res)


def largest_component(bitmap: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(bitmap, structure=_EIGHT)
    if n <= 1:
        return np.asarray(bitmap, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


# ---------------------------------------------------------------------------
# shape


@dataclass(frozen=True)
class ShapeFeatures:
    area: float
    perimeter: float
    eccentricity: float
    circularity: float
    aspect_ratio: float

    def as_array(self) -> np.ndarray:
        return np.array([self.area, self.perimeter, self.eccentricity,
                         self.circularity, self.aspect_ratio])


# (dy, dx), clockwise on screen starting east
_DIRS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


def trace_boundary(bitmap: np.ndarray) -> list[int]:
    """Moore-neighbour trace of the outer boundary as a chain of direction codes.

    Starts at the first foreground pixel in raster order and stops with Jacob's
    criterion (back at the start about to repeat the first move). Even codes are
    axis steps, odd codes diagonal steps.
    """
    b = np.pad(np.asarray(bitmap, dtype=bool), 1)
    ys, xs = np.nonzero(b)
    if len(ys) == 0:
        return []
    start = (int(ys[0]), int(xs[0]))
    cur, back = start, 4  # the west neighbour of the start pixel is background
    chain: list[int] = []
    first = None
    limit = 8 * int(b.sum()) + 16
    while len(chain) < limit:
        for i in range(8):
            d = (back + 1 + i) % 8
            dy, dx = _DIRS[d]
            if b[cur[0] + dy, cur[1] + dx]:
                break
        else:
            return []  # isolated pixel
        if cur == start and first is not None and d == first:
            break
        if first is None:
            first = d
        chain.append(d)
        cur = (cur[0] + _DIRS[d][0], cur[1] + _DIRS[d][1])
        back = (d + 4) % 8
    return chain


def boundary_length_px(bitmap: np.ndarray) -> float:
    chain = trace_boundary(bitmap)
    if not chain:
        return 4.0
    n_odd = sum(c & 1 for c in chain)
    n_even = len(chain) - n_odd
    return _KULPA * (n_even + math.sqrt(2.0) * n_odd)


def _ellipse_moments(bitmap: np.ndarray) -> tuple[float, float]:
    rows, cols = np.nonzero(bitmap)
    y = rows - rows.mean()
    x = cols - cols.mean()
    # pixels are unit squares, each contributing 1/12 of spread per axis
    cxx = np.mean(x * x) + 1.0 / 12.0
    cyy = np.mean(y * y) + 1.0 / 12.0
    cxy = np.mean(x * y)
    half_tr = 0.5 * (cxx + cyy)
    disc = math.sqrt(max(0.25 * (cxx - cyy) ** 2 + cxy * cxy, 0.0))
    return half_tr + disc, max(half_tr - disc, 1e-300)


def shape_features(mask: InstanceMask) -> ShapeFeatures:
    """Area, perimeter, eccentricity, circularity and aspect ratio in micrometre units.

    Multi-component masks are reduced to their largest 8-connected component.
    The perimeter is the Kulpa-corrected length of the traced 8-connected outer
    boundary; a lone pixel gets perimeter ``4 * resolution``. Eccentricity and
    aspect ratio come from the second-order moments of the pixel squares.
    """
    if mask.pixel_count == 0:
        raise ValueError("shape_features of an empty mask")
    bm = largest_component(mask.bitmap)
    res = mask.resolution
    n = int(bm.sum())
    area = n * res * res
    perimeter = boundary_length_px(bm) * res
    lam1, lam2 = _ellipse_moments(bm)
    ratio = min(lam2 / lam1, 1.0)
    ecc = math.sqrt(max(0.0, 1.0 - ratio))
    aspect = math.sqrt(lam1 / lam2)
    circ = 4.0 * math.pi * area / (perimeter * perimeter)
    return ShapeFeatures(area, perimeter, ecc, circ, aspect)


# ---------------------------------------------------------------------------
# texture


def _transitions(pattern: int) -> int:
    bits = [(pattern >> p) & 1 for p in range(8)]
    return sum(bits[p] != bits[(p + 1) % 8] for p in range(8))


def uniform_patterns() -> list[int]:
    """All 8-bit patterns with at most two circular 0/1 transitions, ascending."""
    return [p for p in range(256) if _transitions(p) <= 2]


def _rotations(pattern: int) -> list[int]:
    return [((pattern >> s) | (pattern << (8 - s))) & 0xFF for s in range(8)]


def _build_bin_table() -> np.ndarray:
    uni = uniform_patterns()
    slot = {p: i for i, p in enumerate(uni)}
    table = np.full(256, N_LBP_BINS - 1, dtype=np.int64)
    for p in uni:
        # rotation invariance: every rotation of a uniform pattern shares the
        # bin of its smallest rotation
        table[p] = slot[min(_rotations(p))]
    return table


LBP_BIN = _build_bin_table()


def lbp_codes(gray: np.ndarray) -> np.ndarray:
    """8-bit (8,1) LBP code per interior pixel; border pixels get -1.

    Samples sit on the unit circle at multiples of 45 degrees (bit ``p`` at angle
    ``p*45``, counter-clockwise from east) and are bilinearly interpolated;
    a bit is set when the sample is >= the centre.
    """
    g = np.asarray(gray, dtype=np.float64)
    h, w = g.shape
    codes = np.full((h, w), -1, dtype=np.int64)
    if h < 3 or w < 3:
        return codes
    c = g[1:-1, 1:-1]
    acc = np.zeros(c.shape, dtype=np.int64)
    for p in range(8):
        dy = round(-math.sin(p * math.pi / 4), 12)
        dx = round(math.cos(p * math.pi / 4), 12)
        if dy in (-1.0, 0.0, 1.0) and dx in (-1.0, 0.0, 1.0):
            iy, ix = int(dy), int(dx)
            v = g[1 + iy:h - 1 + iy, 1 + ix:w - 1 + ix]
        else:
            y0 = -1 if dy < 0 else 0
            x0 = -1 if dx < 0 else 0
            fy = dy - y0
            fx = dx - x0
            a = g[1 + y0:h - 1 + y0, 1 + x0:w - 1 + x0]
            b = g[1 + y0:h - 1 + y0, 2 + x0:w + x0]
            cc = g[2 + y0:h + y0, 1 + x0:w - 1 + x0]
            d = g[2 + y0:h + y0, 2 + x0:w + x0]
            # difference form keeps flat neighbourhoods exactly flat
            v = a + fx * (b - a) + fy * (cc - a) + fx * fy * (d - b - cc + a)
        acc |= (v >= c).astype(np.int64) << p
    codes[1:-1, 1:-1] = acc
    return codes


@dataclass
class TextureFeatures:
    lbp_hist: np.ndarray
    valid_pixels: int
    warning: bool = False


def _gray_window(gray, mask: InstanceMask) -> np.ndarray:
    if isinstance(gray, Raster):
        if not math.isclose(gray.resolution, mask.resolution, rel_tol=1e-9):
            raise ValueError("gray raster and mask resolutions differ")
        j0 = round((mask.origin[0] - gray.origin[0]) / gray.resolution)
        i0 = round((mask.origin[1] - gray.origin[1]) / gray.resolution)
        h, w = mask.bitmap.shape
        # pad with a 1-px margin so border pixels of the mask can be valid
        gi0, gj0 = i0 - 1, j0 - 1
        out = np.full((h + 2, w + 2), np.nan)
        H, W = gray.data.shape
        si0, sj0 = max(gi0, 0), max(gj0, 0)
        si1, sj1 = min(gi0 + h + 2, H), min(gj0 + w + 2, W)
        if si1 > si0 and sj1 > sj0:
            out[si0 - gi0:si1 - gi0, sj0 - gj0:sj1 - gj0] = gray.data[si0:si1, sj0:sj1]
        return out
    g = np.asarray(gray, dtype=np.float64)
    if g.shape != mask.bitmap.shape:
        raise ValueError(f"gray shape {g.shape} does not match mask shape {mask.bitmap.shape}")
    return np.pad(g, 1, constant_values=np.nan)


def lbp_histogram(gray, mask: InstanceMask) -> TextureFeatures:
    """Normalised 59-bin rotation-invariant uniform LBP histogram over the mask.

    ``gray`` is either an array aligned with ``mask.bitmap`` or a :class:`Raster`
    in the same micrometre frame. Only foreground pixels whose eight samples
    fall inside the raster count.
    """
    g = _gray_window(gray, mask)
    fg = np.pad(mask.bitmap, 1)
    nan = np.isnan(g)
    codes = lbp_codes(np.where(nan, 0.0, g))
    bad = ndimage.binary_dilation(nan, structure=_EIGHT)
    valid = fg & (codes >= 0) & ~bad
    n = int(valid.sum())
    if n == 0:
        log.warning("no valid pixels for LBP; returning a flat histogram")
        return TextureFeatures(np.full(N_LBP_BINS, 1.0 / N_LBP_BINS), 0, True)
    hist = np.bincount(LBP_BIN[codes[valid]], minlength=N_LBP_BINS).astype(np.float64)
    return TextureFeatures(hist / n, n)


# ---------------------------------------------------------------------------
# membership, segmentation, scaling


def inside_glomerulus(point, glom_masks: list[InstanceMask]) -> int:
    x, y = (point.x, point.y) if hasattr(point, "x") else point
    for m in glom_masks:
        x0, y0, x1, y1 = m.bbox_um()
        if x0 <= x < x1 and y0 <= y < y1 and m.contains(x, y):
            return 1
    return 0


def inside_any(points_xy: np.ndarray, glom_masks: list[InstanceMask]) -> np.ndarray:
    """Vectorised :func:`inside_glomerulus` over an ``(n, 2)`` array."""
    xy = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
    out = np.zeros(len(xy), dtype=np.int64)
    if len(xy) == 0 or not glom_masks:
        return out
    order = np.argsort(xy[:, 0], kind="stable")
    xs = xy[order, 0]
    for m in glom_masks:
        x0, y0, x1, y1 = m.bbox_um()
        lo, hi = np.searchsorted(xs, [x0, x1], side="left")
        cand = order[lo:hi]
        if len(cand) == 0:
            continue
        px = xy[cand]
        j = np.floor((px[:, 0] - m.origin[0]) / m.resolution).astype(np.int64)
        i = np.floor((px[:, 1] - m.origin[1]) / m.resolution).astype(np.int64)
        h, w = m.bitmap.shape
        ok = (i >= 0) & (i < h) & (j >= 0) & (j < w)
        hit = np.zeros(len(cand), dtype=bool)
        hit[ok] = m.bitmap[i[ok], j[ok]]
        out[cand[hit]] = 1
    return out


def contour_segment(channel, intensity_thresh: float, area_thresh_px: int) -> list[InstanceMask]:
    """Threshold + 8-connected components; components under ``area_thresh_px`` are dropped.

    Each surviving component becomes a mask cropped to its bounding box with a
    one-pixel background margin. Output order follows component label order.
    """
    r = channel if isinstance(channel, Raster) else Raster(np.asarray(channel, dtype=np.float64))
    fg = np.asarray(r.data) >= intensity_thresh
    labels, n = ndimage.label(fg, structure=_EIGHT)
    if n == 0:
        return []
    sizes = np.bincount(labels.ravel())
    out = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or sizes[lab] < area_thresh_px:
            continue
        bm = np.pad(labels[sl] == lab, 1)
        ox = r.origin[0] + (sl[1].start - 1) * r.resolution
        oy = r.origin[1] + (sl[0].start - 1) * r.resolution
        out.append(InstanceMask(bm, (ox, oy), r.resolution))
    return out


@dataclass
class ScaleParams:
    minimum: np.ndarray
    maximum: np.ndarray
    names: tuple[str, ...] = field(default_factory=tuple)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        span = self.maximum - self.minimum
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (x - self.minimum) / safe, 0.0)

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return self.minimum + z * (self.maximum - self.minimum)

    def to_dict(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist(), "names": list(self.names)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleParams":
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64),
                   tuple(d.get("names", ())))


def fit_min_max(x: np.ndarray, fit_rows=None, names=()) -> ScaleParams:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    fit = x if fit_rows is None else x[fit_rows]
    if len(fit) == 0:
        raise ValueError("min-max scaling needs at least one fit row")
    return ScaleParams(fit.min(axis=0), fit.max(axis=0), tuple(names))


def min_max_scale(x: np.ndarray, fit_rows=None) -> tuple[np.ndarray, ScaleParams]:
    """Scale columns to [0, 1] with min/max taken from ``fit_rows`` only.

    Constant columns map to 0; values outside the fitted range are not clipped.
    """
    params = fit_min_max(x, fit_rows)
    x = np.asarray(x, dtype=np.float64)
    return params.transform(x if x.ndim == 2 else x[:, None]), params


# ---------------------------------------------------------------------------
# per-node feature vectors


def glom_feature_vector(mask: InstanceMask, gray) -> np.ndarray:
    tex = lbp_histogram(gray, mask)
    return np.concatenate([tex.lbp_hist, shape_features(mask).as_array()])


def cell_feature_vector(mask: InstanceMask, inside: int) -> np.ndarray:
    return np.concatenate([shape_features(mask).as_array(), [float(inside)]])
