"""Regenerate frozen_oracles.json from independent reference implementations.

Nothing here imports hiegnet. Values come from scikit-image, scikit-learn,
scipy and plain loops, then get frozen so the test suite does not need the
reference libraries. Run: python tests/oracles/build_oracles.py
"""
import json
import math
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from shapely.geometry import Point, Polygon
from skimage.feature import local_binary_pattern
from skimage.measure import regionprops
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

OUT = Path(__file__).with_name("frozen_oracles.json")


def uniform_count():
    """Count 8-bit strings with <= 2 circular transitions by string rotation."""
    n = 0
    for p in range(256):
        s = format(p, "08b")
        if sum(a != b for a, b in zip(s, s[1:] + s[0])) <= 2:
            n += 1
    return n


def lbp_fixtures():
    """Rotation-invariant uniform histograms (59 bins, uniform patterns ordered by value) via skimage 'ror'."""
    uni = [p for p in range(256) if sum(((p >> i) & 1) != ((p >> ((i + 1) % 8)) & 1) for i in range(8)) <= 2]
    slot = {p: i for i, p in enumerate(uni)}
    out = []
    for seed, shape in ((11, (18, 21)), (12, (25, 25)), (13, (9, 30))):
        rng = np.random.default_rng(seed)
        img = rng.integers(0, 256, shape).astype(np.uint8)
        mask = rng.random(shape) < 0.7
        codes = local_binary_pattern(img, 8, 1, "ror").astype(int)
        valid = np.zeros(shape, bool)
        valid[1:-1, 1:-1] = True
        valid &= mask
        hist = np.zeros(59)
        for c in codes[valid]:
            hist[slot.get(c, 58)] += 1
        out.append({"seed": seed, "shape": list(shape), "mask_p": 0.7, "hist": (hist / hist.sum()).tolist()})
    return out


def step_edge_rotation_l1():
    img = np.zeros((40, 40), np.uint8)
    img[:, 20:] = 200
    uni = [p for p in range(256) if sum(((p >> i) & 1) != ((p >> ((i + 1) % 8)) & 1) for i in range(8)) <= 2]
    slot = {p: i for i, p in enumerate(uni)}

    def hist(a):
        c = local_binary_pattern(a, 8, 1, "ror").astype(int)[1:-1, 1:-1]
        h = np.bincount([slot.get(v, 58) for v in c.ravel()], minlength=59).astype(float)
        return h / h.sum()

    return float(np.abs(hist(img) - hist(np.rot90(img))).sum())


def shape_fixtures():
    """regionprops axis lengths use raw central moments; we store them for the loose comparisons."""
    yy, xx = np.mgrid[-60:61, -60:61]
    disk = (xx ** 2 + yy ** 2 <= 50 ** 2).astype(np.uint8)
    rect = np.zeros((30, 40), np.uint8)
    rect[10:20, 10:30] = 1
    res = {}
    for name, img in (("disk50", disk), ("rect20x10", rect)):
        p = regionprops(img)[0]
        res[name] = {"area_px": int(p.area), "eccentricity": float(p.eccentricity),
                     "aspect_ratio": float(p.major_axis_length / p.minor_axis_length),
                     "perimeter_crofton": float(p.perimeter_crofton)}
    return res


def polygon_membership():
    """Rasterised pentagon and 100 probe points; truth from shapely on pixel centres."""
    rng = np.random.default_rng(21)
    ang = np.sort(rng.uniform(0, 2 * np.pi, 5))
    poly = Polygon([(40 + 25 * math.cos(a), 35 + 22 * math.sin(a)) for a in ang])
    h, w = 80, 90
    bitmap = np.zeros((h, w), bool)
    for i in range(h):
        for j in range(w):
            bitmap[i, j] = poly.contains(Point(j + 0.5, i + 0.5))
    pts = rng.uniform(0, 90, (100, 2))
    # a probe counts as inside when the pixel it falls in is foreground
    inside = [int(bitmap[int(y), int(x)]) if 0 <= int(y) < h and 0 <= int(x) < w else 0 for x, y in pts]
    return {"vertices": [list(c) for c in poly.exterior.coords], "shape": [h, w],
            "bitmap_rows": ["".join("1" if v else "0" for v in row) for row in bitmap],
            "points": pts.tolist(), "inside": inside}


def metrics_fixtures():
    rng = np.random.default_rng(31)
    out = []
    for n in (10, 50, 1000):
        y = rng.integers(0, 3, n)
        p = rng.integers(0, 3, n)
        pr, rc, f1, _ = precision_recall_fscore_support(y, p, labels=[0, 1, 2], zero_division=0)
        out.append({"labels": y.tolist(), "pred": p.tolist(), "macro_f1": float(f1.mean()),
                    "macro_precision": float(pr.mean()), "macro_recall": float(rc.mean()),
                    "confusion": confusion_matrix(y, p, labels=[0, 1, 2]).tolist()})
    # all-majority prediction on 60/25/15
    y = np.array([0] * 60 + [1] * 25 + [2] * 15)
    pr, rc, f1, _ = precision_recall_fscore_support(y, np.zeros_like(y), labels=[0, 1, 2], zero_division=0)
    out.append({"labels": y.tolist(), "pred": [0] * 100, "macro_f1": float(f1.mean()),
                "macro_precision": float(pr.mean()), "macro_recall": float(rc.mean()),
                "confusion": confusion_matrix(y, np.zeros_like(y), labels=[0, 1, 2]).tolist()})
    return out


def spatial_fixture():
    """Brute-force kNN (k=5, excluding self) and eps=100 neighbourhoods via scipy cdist."""
    rng = np.random.default_rng(41)
    pts = rng.uniform(0, 600, (60, 2))
    d = cdist(pts, pts)
    knn = []
    for i in range(len(pts)):
        order = sorted((d[i, j], j) for j in range(len(pts)) if j != i)[:5]
        knn.append([j for _, j in order])
    radius = [sorted(np.nonzero(d[i] <= 100.0)[0].tolist()) for i in range(len(pts))]
    return {"points": pts.tolist(), "knn5": knn, "radius100": radius}


def adam_one_step():
    g, lr, b1, b2, eps = 1.0, 1e-3, 0.9, 0.999, 1e-8
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mh, vh = m / (1 - b1), v / (1 - b2)
    return -lr * mh / (math.sqrt(vh) + eps)


def one_cycle_samples():
    """Cosine warm-up/anneal shape written out independently, total=100, warmup 0.3."""
    max_lr, total, pct, d0, d1 = 1e-3, 100, 0.3, 25.0, 1e4
    lo, hi, fin = max_lr / d0, max_lr, max_lr / d1
    up = pct * total - 1
    out = {}
    for s in (0, 10, 29, 50, 99):
        if s <= up:
            frac, a, b = s / up, lo, hi
        else:
            frac, a, b = (s - up) / (total - 1 - up), hi, fin
        out[str(s)] = b + (a - b) / 2 * (math.cos(math.pi * frac) + 1)
    return out


def class_weights_exc():
    n = np.array([1326, 417, 307], float)
    w = n.sum() / (3 * n)
    return w.tolist()


def seg_fixtures():
    """Hand-built AP(tau) = TP/(TP+FP+FN) for three layouts; thresholds 0.05..1.0."""
    taus = [round(0.05 * k, 2) for k in range(1, 21)]
    # (a) 2 truths, 1 perfect prediction
    a = [0.5 for _ in taus]
    # (b) 1 truth 10x10, prediction shifted by 5 columns: IoU = 50/150
    iou_b = 50 / 150
    b = [1.0 if t <= iou_b else 0.0 for t in taus]
    # (c) 2 truths matched at IoU 1 and 0.5, one spurious prediction
    c = []
    for t in taus:
        tp = (1 if t <= 1.0 else 0) + (1 if t <= 0.5 else 0)
        c.append(tp / (tp + (3 - tp) + (2 - tp)))
    trap = lambda ys: float(np.trapezoid(ys, taus) / (taus[-1] - taus[0]))  # noqa: E731
    return {"taus": taus, "two_truth_one_pred": {"ap": a, "auc": trap(a)},
            "shifted": {"iou": iou_b, "ap": b, "auc": trap(b)},
            "mixed": {"ap": c, "auc": trap(c)}}


def stratified_counts():
    """Per-class test counts for fraction 0.15 on 60/25/15 by rounding n_c * f."""
    return [round(60 * 0.15), round(25 * 0.15), round(15 * 0.15)]


def cfconv_path():
    """Path a-b-c with raw distances 30 and 70; target b; w(e) = 1/(e_norm + 0.01), e_norm min-max over the two edges."""
    d = np.array([30.0, 70.0])
    e = (d - d.min()) / (d.max() - d.min())
    w = 1 / (e + 0.01)
    ha, hc = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    return {"weights": w.tolist(), "message": (w[0] * ha + w[1] * hc).tolist()}


def main():
    data = {
        "uniform_pattern_count": uniform_count(),
        "lbp": lbp_fixtures(),
        "lbp_step_edge_rot90_l1": step_edge_rotation_l1(),
        "shape": shape_fixtures(),
        "polygon": polygon_membership(),
        "metrics": metrics_fixtures(),
        "spatial": spatial_fixture(),
        "adam_one_step": adam_one_step(),
        "one_cycle": one_cycle_samples(),
        "class_weights_exc": class_weights_exc(),
        "seg": seg_fixtures(),
        "stratified_counts_60_25_15": stratified_counts(),
        "cfconv_path": cfconv_path(),
        "xor_depth1_acc_max": 0.75,
    }
    OUT.write_text(json.dumps(data, indent=1) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
