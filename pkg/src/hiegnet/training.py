"""Splits, weighted loss, the training loop, metrics, search and ablation protocols."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import diffmath as dm
from . import hetgraph as hg
from . import model as M
from . import morphology as morph

log = logging.getLogger(__name__)

N_CLASSES = 3


@dataclass
class TrainConfig:
    max_epochs: int = 600
    patience: int = 60
    max_lr: float = 0.001
    seed: int = 0
    class_weight: str = "balanced"  # or "none"
    val_fraction: float = 0.15
    warmup: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4
    n_seeds: int = 20
    min_epochs: int = 0  # early stopping is armed from this epoch on

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.class_weight not in ("balanced", "none"):
            raise ValueError(f"class_weight must be 'balanced' or 'none', got {self.class_weight!r}")


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    macro_f1: float
    macro_precision: float
    macro_recall: float
    f1: list[float]
    precision: list[float]
    recall: list[float]
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(pred, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction/label length mismatch {pred.shape} vs {labels.shape}")
    return np.bincount(labels * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b > 0)


def evaluate(pred, labels, n_classes: int = N_CLASSES) -> Metrics:
    """Per-class precision/recall/F1 (zero denominators give 0) and their unweighted means."""
    cm = confusion_matrix(pred, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    p = _safe_div(tp, cm.sum(axis=0).astype(np.float64))
    r = _safe_div(tp, cm.sum(axis=1).astype(np.float64))
    f = _safe_div(2 * p * r, p + r)
    return Metrics(float(f.mean()), float(p.mean()), float(r.mean()), f.tolist(), p.tolist(), r.tolist(),
                   cm.tolist())


def class_weights(labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """w_c = N / (C * N_c); classes absent from ``labels`` get weight 0."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    w = _safe_div(np.full(n_classes, float(len(labels))), n_classes * counts)
    for c in np.nonzero(counts == 0)[0]:
        log.warning("class %d absent from training labels; its loss weight is 0", c)
    return w


def weighted_ce_loss(logits: dm.Tensor, labels, weights=None) -> dm.Tensor:
    return dm.cross_entropy(logits, labels, weights)


# ---------------------------------------------------------------------------
# splits


def stratified_split(labels, fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(train, test) positions; each class sends round(fraction * n_c) members to test."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    test = []
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        k = int(math.floor(fraction * len(members) + 0.5))
        test.append(rng.permutation(members)[:k])
    test = np.sort(np.concatenate(test)) if test else np.empty(0, np.int64)
    train = np.setdiff1d(np.arange(len(labels)), test)
    return train, test


def kfold(labels, k: int = 4, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified folds: members of each class are shuffled and dealt round-robin."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        if len(members) < k:
            raise ValueError(f"class {c} has {len(members)} members, fewer than k={k}")
        perm = rng.permutation(members)
        fold_of[perm] = (np.arange(len(perm)) + offset) % k
        offset += len(perm)
    idx = np.arange(len(labels))
    return [(idx[fold_of != f], idx[fold_of == f]) for f in range(k)]


# ---------------------------------------------------------------------------
# tasks: scaled graphs plus per-graph train/val/test glomerulus positions


@dataclass
class Task:
    graphs: list[hg.HeteroGraph]                     # scaled
    prepared: list[M.Prepared]
    train: list[np.ndarray]
    val: list[np.ndarray]
    test: list[np.ndarray]
    scaler: hg.GraphScaler | None = None
    raw: list[hg.HeteroGraph] = field(default_factory=list)

    def labels(self, part: str) -> np.ndarray:
        idx = getattr(self, part)
        return np.concatenate([g.y[i] for g, i in zip(self.graphs, idx)]) if idx else np.empty(0, np.int64)

    def features(self, part: str, raw: bool = True) -> np.ndarray:
        src = self.raw if raw and self.raw else self.graphs
        idx = getattr(self, part)
        return np.concatenate([g.x[hg.GLOM][i] for g, i in zip(src, idx)])


def _pool(graphs):
    gid = np.concatenate([np.full(g.num_nodes(hg.GLOM), k) for k, g in enumerate(graphs)])
    pos = np.concatenate([np.arange(g.num_nodes(hg.GLOM)) for g in graphs])
    y = np.concatenate([g.y for g in graphs])
    keep = y != hg.UNLABELED
    return gid[keep], pos[keep], y[keep]


def _unpool(n_graphs, gid, pos, sel):
    return [np.sort(pos[sel][gid[sel] == k]) for k in range(n_graphs)]


def make_task(graphs: list[hg.HeteroGraph], mode: str = "within", test_fraction: float = 0.15,
              val_fraction: float = 0.15, seed: int = 0, test_graphs: list[hg.HeteroGraph] | None = None,
              spec: M.ModelSpec | None = None, fixed: tuple | None = None) -> Task:
    """Split labelled glomeruli and scale with training-only statistics.

    ``within``: one stratified split over all glomeruli of ``graphs``.
    ``between``: ``graphs`` train, ``test_graphs`` test. Validation is a
    stratified ``val_fraction`` of the training glomeruli in both modes.
    ``fixed`` = (train, test) pooled positions overrides the random split.
    """
    if mode == "between":
        if not test_graphs:
            raise ValueError("between mode needs test_graphs")
        all_graphs = list(graphs) + list(test_graphs)
        n_tr = len(graphs)
        gid, pos, y = _pool(all_graphs)
        is_tr = gid < n_tr
        tr_pool = np.nonzero(is_tr)[0]
        te_pool = np.nonzero(~is_tr)[0]
    elif mode == "within":
        all_graphs = list(graphs)
        gid, pos, y = _pool(all_graphs)
        if fixed is not None:
            tr_pool, te_pool = fixed
        else:
            tr_pool, te_pool = stratified_split(y, test_fraction, seed)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    if val_fraction > 0:
        a, b = stratified_split(y[tr_pool], val_fraction, seed + 7919)
        fit_pool, val_pool = tr_pool[a], tr_pool[b]
    else:
        fit_pool, val_pool = tr_pool, np.empty(0, np.int64)
    n = len(all_graphs)
    sel = lambda p: np.isin(np.arange(len(y)), p)  # noqa: E731
    train, val, test = (_unpool(n, gid, pos, sel(p)) for p in (fit_pool, val_pool, te_pool))
    if mode == "between":
        fit_graphs = all_graphs[:n_tr]
        rows = [np.concatenate([train[k], val[k]]) for k in range(n_tr)]
    else:
        fit_graphs = all_graphs
        rows = [np.concatenate([train[k], val[k]]) for k in range(n)]
    scaler = hg.GraphScaler.fit(fit_graphs, rows)
    scaled = [scaler.apply(g) for g in all_graphs]
    prepared = [M.prepare(g, spec) for g in scaled]
    return Task(scaled, prepared, train, val, test, scaler, all_graphs)


def split_record(task: Task) -> dict:
    """Plain-JSON description of a task's split, enough to rebuild it with ``restore_task``."""
    return {part: [i.astype(int).tolist() for i in getattr(task, part)] for part in ("train", "val", "test")}


def restore_task(raw: list[hg.HeteroGraph], record: dict, scaler: hg.GraphScaler,
                 spec: M.ModelSpec | None = None) -> Task:
    if len(raw) != len(record["train"]):
        raise ValueError(f"split covers {len(record['train'])} graphs, {len(raw)} given")
    parts = {k: [np.asarray(v, dtype=np.int64) for v in record[k]] for k in ("train", "val", "test")}
    scaled = [scaler.apply(g) for g in raw]
    return Task(scaled, [M.prepare(g, spec) for g in scaled], parts["train"], parts["val"], parts["test"],
                scaler, list(raw))


def ablate_task(task: Task, group: str, spec: M.ModelSpec | None = None) -> Task:
    graphs = [hg.remove_edge_type_group(g, group) for g in task.graphs]
    raw = [hg.remove_edge_type_group(g, group) for g in task.raw]
    return replace(task, graphs=graphs, raw=raw, prepared=[M.prepare(g, spec) for g in graphs])


# ---------------------------------------------------------------------------
# training


@dataclass
class FitResult:
    params: M.ParamStore
    best_epoch: int
    epochs_run: int
    best_val_f1: float
    loss_curve: list[float]
    val_curve: list[float]


def predict_task(spec: M.ModelSpec, P: M.ParamStore, task: Task, part: str) -> np.ndarray:
    return M.predict(task_probs(spec, P, task, part))


def task_probs(spec: M.ModelSpec, P: M.ParamStore, task: Task, part: str) -> np.ndarray:
    """Class probabilities of the ``part`` glomeruli, in task order."""
    idx = getattr(task, part)
    out = [M.forward(spec, P, prep, roots=i).probs[i] for prep, i in zip(task.prepared, idx) if len(i)]
    return np.concatenate(out) if out else np.empty((0, spec.n_classes))


def _val_loss(probs: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    p = np.clip(probs[np.arange(len(y)), y], 1e-300, None)
    return float(np.mean(w[y] * -np.log(p))) if len(y) else 0.0


def fit(spec: M.ModelSpec, task: Task, cfg: TrainConfig) -> FitResult:
    """Full-graph ADAM steps (one per training graph per epoch) with early stopping.

    An epoch improves on the best so far when its validation macro-F1 is higher,
    or equal with a lower (class-weighted) validation loss.
    """
    P = M.init_params(spec, cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    y_train = task.labels("train")
    w = class_weights(y_train, spec.n_classes) if cfg.class_weight == "balanced" else np.ones(spec.n_classes)
    steps_per_epoch = sum(1 for i in task.train if len(i))
    sched = dm.OneCycleSchedule(cfg.max_lr, max(cfg.max_epochs * steps_per_epoch, 1), cfg.warmup,
                                cfg.div_start, cfg.div_final)
    state = dm.AdamState()
    val_part = "val" if sum(len(v) for v in task.val) else "train"
    y_val = task.labels(val_part)
    best = (-1.0, math.inf, 0, P.copy_arrays())
    losses, vals = [], []
    step = 0
    epoch = 0
    for epoch in range(cfg.max_epochs):
        ep_loss = 0.0
        for prep, i in zip(task.prepared, task.train):
            if not len(i):
                continue
            P.zero_grad()
            with dm.Tape() as tape:
                out = M.forward(spec, P, prep, train=True, rng=drop_rng)
                loss = dm.cross_entropy(dm.gather_rows(out.logits_t, i), prep.graph.y[i], w)
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise dm.NumericError(f"non-finite loss {lv} at epoch {epoch}, step {step}")
            tape.backward(loss)
            dm.adam_step(P.arrays(), P.grads(), state, dm.one_cycle_lr(sched, step))
            step += 1
            ep_loss += lv
        losses.append(ep_loss / max(steps_per_epoch, 1))
        probs = task_probs(spec, P, task, val_part)
        f1 = evaluate(M.predict(probs), y_val, spec.n_classes).macro_f1
        vl = _val_loss(probs, y_val, w)
        vals.append(f1)
        if f1 > best[0] or (f1 == best[0] and vl < best[1]):
            best = (f1, vl, epoch, P.copy_arrays())
        elif epoch - best[2] >= cfg.patience and epoch + 1 >= cfg.min_epochs:
            break
    if len(losses) > 50 and losses[-1] > losses[-51]:
        log.warning("training loss rose over the last 50 epochs (%.4g -> %.4g)", losses[-51], losses[-1])
    P.load_arrays(best[3])
    return FitResult(P, best[2], epoch + 1, best[0], losses, vals)


# ---------------------------------------------------------------------------
# multi-seed evaluation


@dataclass
class RunMetrics:
    seeds: list[int]
    per_seed: list[dict]
    mean: dict[str, float]
    std: dict[str, float]
    confusion: list[list[int]]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(seeds: list[int], results: list[Metrics], extra_per_seed: list[dict] | None = None) -> RunMetrics:
    keys = ("macro_f1", "macro_precision", "macro_recall")
    per = []
    for k, (s, m) in enumerate(zip(seeds, results)):
        d = {"seed": s, **m.to_dict()}
        if extra_per_seed:
            d.update(extra_per_seed[k])
        per.append(d)
    mean = {k: float(np.mean([getattr(m, k) for m in results])) for k in keys}
    std = {k: float(np.std([getattr(m, k) for m in results])) for k in keys}
    cm = np.sum([np.asarray(m.confusion) for m in results], axis=0).tolist()
    return RunMetrics(list(seeds), per, mean, std, cm)


def _one_seed(spec, task, cfg, seed):
    res = fit(spec, task, replace(cfg, seed=seed))
    m = evaluate(predict_task(spec, res.params, task, "test"), task.labels("test"), spec.n_classes)
    return m, {"best_epoch": res.best_epoch, "epochs_run": res.epochs_run}


def multi_seed(spec: M.ModelSpec, task: Task, cfg: TrainConfig, n: int = 20, seeds=None,
               n_jobs: int = 1) -> RunMetrics:
    if n < 2 and seeds is None:
        raise ValueError("multi_seed needs n >= 2")
    seeds = list(seeds) if seeds is not None else [cfg.seed + k for k in range(n)]
    if n_jobs > 1:
        from joblib import Parallel, delayed

        outs = Parallel(n_jobs=n_jobs)(delayed(_one_seed)(spec, task, cfg, s) for s in seeds)
    else:
        outs = [_one_seed(spec, task, cfg, s) for s in seeds]
    return summarize(seeds, [o[0] for o in outs], [o[1] for o in outs])


# ---------------------------------------------------------------------------
# grid search

SEARCH_SPACE = {
    "dropout": [0.1, 0.2, 0.3, 0.4, 0.5],
    "hidden": [32, 64],
    "layers": [2, 3],
    "n_fc": [1, 2],
    "kind_gg": ["GATV2", "SAGE", "ESAGE"],
    "kind_ig": ["GATV2", "SAGE"],
    "kind_i": ["GATV2", "SAGE", "GCN", "GINE", "CFCONV"],
}


def expand_space(space: dict) -> list[dict]:
    keys = list(space)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(space[k] for k in keys))]


def grid_search(base: M.ModelSpec, space: dict, graphs: list[hg.HeteroGraph], cfg: TrainConfig,
                k: int = 4, seed: int = 0, n_jobs: int = 1) -> list[dict]:
    """k-fold CV macro-F1 per config, sorted descending (ties: lower config id first).

    Besides ModelSpec fields the space may contain ``remove_groups``: a list of
    edge-type groups (joined by ``+``) dropped from every graph.
    """
    _, _, y = _pool(graphs)
    folds = kfold(y, k, seed)
    configs = expand_space(space)

    def run(cid, conf):
        conf = dict(conf)
        removed = conf.pop("remove_groups", "")
        spec = replace(base, **conf)
        gs = graphs
        for grp in filter(None, removed.split("+")):
            gs = [hg.remove_edge_type_group(g, grp) for g in gs]
        scores = []
        for f, (tr, te) in enumerate(folds):
            task = make_task(gs, "within", seed=seed + f, spec=spec, fixed=(tr, te),
                             val_fraction=cfg.val_fraction)
            res = fit(spec, task, cfg)
            scores.append(evaluate(predict_task(spec, res.params, task, "test"), task.labels("test")).macro_f1)
        return {"config_id": cid, **configs[cid], "cv_macro_f1": float(np.mean(scores)), "fold_f1": scores}

    if n_jobs > 1:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=n_jobs)(delayed(run)(i, c) for i, c in enumerate(configs))
    else:
        rows = [run(i, c) for i, c in enumerate(configs)]
    return sorted(rows, key=lambda r: (-r["cv_macro_f1"], r["config_id"]))


# ---------------------------------------------------------------------------
# edge-type ablation

ABLATION_GROUPS = ("r_gg", "R_ig", "R_i")


def _r6(x: float) -> float:
    return round(float(x), 6)


def edge_ablation_study(spec: M.ModelSpec, task: Task, cfg: TrainConfig, groups=ABLATION_GROUPS,
                        n_seeds: int = 20, seeds=None, full: RunMetrics | None = None,
                        n_jobs: int = 1) -> list[dict]:
    """Retrain per removed group; F1 values rounded to 6 places so ``full + delta == ablated``."""
    full = full or multi_seed(spec, task, cfg, n_seeds, seeds, n_jobs)
    f_full = _r6(full.mean["macro_f1"])
    rows = [{"removed": "none", "macro_f1": f_full, "std": _r6(full.std["macro_f1"]), "delta": 0.0}]
    for grp in groups:
        abl = ablate_task(task, grp, spec)
        if sum(g.num_edges() for g in abl.graphs) == sum(g.num_edges() for g in task.graphs):
            # nothing removed: identical problem, identical outcome
            rm = full
        else:
            rm = multi_seed(spec, abl, cfg, n_seeds, full.seeds, n_jobs)
        f = _r6(rm.mean["macro_f1"])
        rows.append({"removed": grp, "macro_f1": f, "std": _r6(rm.std["macro_f1"]), "delta": _r6(f - f_full)})
    return rows


# ---------------------------------------------------------------------------
# segmentation AP / IoU-AUC

IOU_THRESHOLDS = np.round(np.arange(1, 21) * 0.05, 2)


def _as_masks(masks) -> np.ndarray:
    arr = [np.asarray(m, dtype=bool) for m in masks]
    return np.stack(arr) if arr else np.zeros((0, 1, 1), dtype=bool)


def _pixel_matrix(masks: list, cols: dict | None = None):
    """Sparse (mask x global pixel) incidence for InstanceMasks on a common grid."""
    res = masks[0].resolution
    keys, rows = [], []
    for k, m in enumerate(masks):
        if abs(m.resolution - res) > 1e-12:
            raise ValueError("masks must share one resolution")
        i, j = np.nonzero(m.bitmap)
        i0, j0 = int(round(m.origin[1] / res)), int(round(m.origin[0] / res))
        keys.append(((i + i0).astype(np.int64) << 32) + (j + j0).astype(np.int64))
        rows.append(np.full(len(i), k))
    return np.concatenate(keys), np.concatenate(rows)


def _iou_instances(pred: list, truth: list) -> np.ndarray:
    kp, rp = _pixel_matrix(pred)
    kt, rt = _pixel_matrix(truth)
    uniq, inv = np.unique(np.concatenate([kp, kt]), return_inverse=True)
    n = len(uniq)
    P = sp.csr_matrix((np.ones(len(kp)), (rp, inv[:len(kp)])), shape=(len(pred), n))
    Tm = sp.csr_matrix((np.ones(len(kt)), (rt, inv[len(kp):])), shape=(len(truth), n))
    inter = (Tm @ P.T).toarray()
    union = np.asarray(Tm.sum(1)) + np.asarray(P.sum(1)).T - inter
    return _safe_div(inter, union)


def iou_matrix(pred, truth) -> np.ndarray:
    """(truth x prediction) IoU; masks are boolean arrays on one grid or ``InstanceMask`` objects."""
    if len(pred) == 0 or len(truth) == 0:
        return np.zeros((len(truth), len(pred)))
    if isinstance(pred[0], morph.InstanceMask):
        return _iou_instances(list(pred), list(truth))
    p = _as_masks(pred).reshape(len(pred), -1).astype(np.float64)
    t = _as_masks(truth).reshape(len(truth), -1).astype(np.float64)
    inter = t @ p.T
    union = t.sum(1)[:, None] + p.sum(1)[None, :] - inter
    return _safe_div(inter, union)


def greedy_match(iou: np.ndarray) -> list[tuple[int, int, float]]:
    """One-to-one matching by descending IoU; ties by lower truth id then lower prediction id."""
    ti, pi = np.nonzero(iou > 0)
    vals = iou[ti, pi]
    order = np.lexsort((pi, ti, -vals))
    used_t, used_p, out = set(), set(), []
    for o in order:
        t, p = int(ti[o]), int(pi[o])
        if t in used_t or p in used_p:
            continue
        used_t.add(t)
        used_p.add(p)
        out.append((t, p, float(vals[o])))
    return out


@dataclass
class SegScore:
    thresholds: list[float]
    ap: list[float]
    auc: float


def seg_ap_auc(pred, truth) -> SegScore:
    """AP(tau) = TP / (TP + FP + FN) after greedy matching; AUC is the trapezoid over tau divided by its range."""
    iou = iou_matrix(pred, truth)
    matches = greedy_match(iou)
    mi = np.array([m[2] for m in matches])
    n_p, n_t = len(pred), len(truth)
    ap = []
    for tau in IOU_THRESHOLDS:
        tp = int(np.count_nonzero(mi >= tau)) if len(mi) else 0
        den = tp + (n_p - tp) + (n_t - tp)
        ap.append(tp / den if den else 0.0)
    ap = np.array(ap)
    t = IOU_THRESHOLDS
    auc = float(np.sum((ap[1:] + ap[:-1]) * np.diff(t)) / 2 / (t[-1] - t[0]))
    return SegScore(t.tolist(), ap.tolist(), auc)
