"""Synthetic-data experiment protocols: GNN vs forest, edge ablation, within vs between slides."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import baseline as B
from . import hetgraph as hg
from . import model as M
from . import synthdata as sd
from . import training as T

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    n_glomeruli: int = 500
    n_seeds: int = 20
    train_slide_seed: int = 1
    test_slide_seed: int = 2
    spec: M.ModelSpec = field(default_factory=M.ModelSpec)
    train: T.TrainConfig = field(default_factory=T.TrainConfig)
    forest: B.ForestSpec = field(default_factory=B.ForestSpec)
    graph: hg.GraphConfig = field(default_factory=hg.GraphConfig)
    synth: dict = field(default_factory=dict)  # SynthConfig overrides
    n_jobs: int = 1

    @property
    def seeds(self) -> list[int]:
        return [self.train.seed + k for k in range(self.n_seeds)]


def synth_graph(mode: str, n: int, seed: int, graph: hg.GraphConfig | None = None,
                synth: dict | None = None) -> hg.HeteroGraph:
    slide = sd.generate(sd.SynthConfig(**{**(synth or {}), "n_glomeruli": n, "relational_mode": mode, "seed": seed}))
    return slide.to_graph(graph, name=f"{mode}_{seed}")


def rf_multi_seed(task: T.Task, spec: B.ForestSpec, seeds) -> T.RunMetrics:
    """One forest per seed on the raw features of the training and validation rows."""
    X = np.concatenate([task.features("train"), task.features("val")])
    y = np.concatenate([task.labels("train"), task.labels("val")])
    Xt, yt = task.features("test"), task.labels("test")
    res = []
    for s in seeds:
        forest = B.rf_fit(X, y, replace(spec, seed=s), n_classes=3)
        res.append(T.evaluate(B.rf_predict(forest, Xt)[0], yt))
    return T.summarize(list(seeds), res)


def compare_on_task(task: T.Task, cfg: ExperimentConfig) -> dict:
    gnn = T.multi_seed(cfg.spec, task, cfg.train, seeds=cfg.seeds, n_jobs=cfg.n_jobs)
    rf = rf_multi_seed(task, cfg.forest, cfg.seeds)
    return {"hiegnet": gnn, "rf": rf, "delta": gnn.mean["macro_f1"] - rf.mean["macro_f1"]}


def between_task(mode: str, cfg: ExperimentConfig) -> T.Task:
    tr = synth_graph(mode, cfg.n_glomeruli, cfg.train_slide_seed, cfg.graph, cfg.synth)
    te = synth_graph(mode, cfg.n_glomeruli, cfg.test_slide_seed, cfg.graph, cfg.synth)
    return T.make_task([tr], "between", test_graphs=[te], val_fraction=cfg.train.val_fraction,
                       seed=cfg.train.seed, spec=cfg.spec)


def relational_signal(cfg: ExperimentConfig, modes=("immune_density", "none")) -> dict:
    """HIEGNet vs forest on one train slide and one test slide per relational mode."""
    out = {}
    for mode in modes:
        task = between_task(mode, cfg)
        out[mode] = {"task": task, **compare_on_task(task, cfg)}
        log.info("%s: hiegnet %.3f rf %.3f", mode, out[mode]["hiegnet"].mean["macro_f1"],
                 out[mode]["rf"].mean["macro_f1"])
    return out


def edge_ablation(cfg: ExperimentConfig, task: T.Task | None = None, full: T.RunMetrics | None = None) -> list[dict]:
    task = task or between_task("immune_density", cfg)
    return T.edge_ablation_study(cfg.spec, task, cfg.train, seeds=cfg.seeds, full=full, n_jobs=cfg.n_jobs)


def generalisation(cfg: ExperimentConfig, mode: str = "neighbor_class") -> dict:
    """Within: pooled 85/15 split of both slides. Between: train on one slide, test on the other."""
    a = synth_graph(mode, cfg.n_glomeruli, cfg.train_slide_seed, cfg.graph, cfg.synth)
    b = synth_graph(mode, cfg.n_glomeruli, cfg.test_slide_seed, cfg.graph, cfg.synth)
    within = T.make_task([a, b], "within", val_fraction=cfg.train.val_fraction, seed=cfg.train.seed, spec=cfg.spec)
    between = T.make_task([a], "between", test_graphs=[b], val_fraction=cfg.train.val_fraction,
                          seed=cfg.train.seed, spec=cfg.spec)
    out = {"within": compare_on_task(within, cfg), "between": compare_on_task(between, cfg)}
    for model in ("hiegnet", "rf"):
        out[f"{model}_drop"] = out["within"][model].mean["macro_f1"] - out["between"][model].mean["macro_f1"]
    return out


def summary_row(name: str, rm: T.RunMetrics) -> dict:
    return {"model": name, "macro_f1": rm.mean["macro_f1"], "std": rm.std["macro_f1"],
            "precision": rm.mean["macro_precision"], "recall": rm.mean["macro_recall"]}
