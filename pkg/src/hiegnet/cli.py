"""Command line entry point: ``hiegnet <subcommand> [--config C] [--seed S] [--threads N] [--out DIR]``.

Every subcommand writes into the run directory (``--out`` or ``output.dir``)
and leaves ``config.json`` there. Exit codes: 1 config error, 2 data error,
3 numeric failure. Errors are also printed as one JSON object on stdout.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
import time
import tracemalloc
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import baseline as B
from . import bench as BN
from . import config as C
from . import diffmath as dm
from . import hetgraph as hg
from . import model as M
from . import morphology as morph
from . import pnm
from . import render as R
from . import synthdata as sd
from . import training as T

log = logging.getLogger("hiegnet")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# run-directory helpers


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in r.items()})


def graph_paths(cfg: C.RunConfig, out: Path) -> list[Path]:
    paths = [Path(p) for p in cfg.data.graphs] or sorted((out / "graphs").glob("*.json"))
    if not paths:
        raise DataError(f"no graphs: set data.graphs or run build-graph into {out}")
    return paths


def load_graphs(paths: list[Path]) -> list[hg.HeteroGraph]:
    return [hg.deserialize(p) for p in paths]


def split_graphs(cfg: C.RunConfig, out: Path) -> tuple[list[Path], list[Path]]:
    """(train paths, test paths); test is empty in within mode."""
    paths = graph_paths(cfg, out)
    if cfg.data.split == "within":
        return paths, []
    test = [Path(p) for p in cfg.data.test_graphs]
    if not test:
        if len(paths) < 2:
            raise DataError("between split needs at least two graphs")
        return paths[:-1], paths[-1:]
    return [p for p in paths if p not in test], test


def make_task(cfg: C.RunConfig, spec: M.ModelSpec, train_p, test_p) -> T.Task:
    tr = load_graphs(train_p)
    te = load_graphs(test_p)
    return T.make_task(tr, cfg.data.split, cfg.data.test_fraction, cfg.train.val_fraction, cfg.train.seed,
                       te or None, spec)


def metrics_record(model: str, seed: int, m: T.Metrics, extra: dict | None = None) -> dict:
    return {"model": model, "seed": seed, "test": m.to_dict(), **(extra or {})}


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: C.RunConfig, out: Path, args) -> dict:
    slides = []
    for k in range(cfg.data.n_slides):
        sc = replace(cfg.synth, seed=cfg.synth.seed + k)
        slide = sd.generate(sc)
        d = slide.write(out / "slides" / f"slide_{k:02d}", rasters=True, stains=args.stains)
        slides.append({"dir": str(d.relative_to(out)), "seed": sc.seed, "n_glomeruli": len(slide.gloms),
                       "n_cells": len(slide.cells), "labels": np.bincount(slide.labels, minlength=3).tolist()})
    write_json(out / "slides" / "index.json", slides)
    return {"slides": slides}


def cmd_build_graph(cfg: C.RunConfig, out: Path, args) -> dict:
    csvs = [Path(p) for p in cfg.data.nodes_csv] or sorted((out / "slides").glob("*/nodes.csv"))
    if not csvs:
        raise DataError(f"no node CSVs: set data.nodes_csv or run synth into {out}")
    rows = []
    for p in csvs:
        gray_path = p.parent / cfg.features.texture_channel
        if not gray_path.exists():
            raise DataError(f"missing texture raster {gray_path}")
        gray = morph.Raster.load(gray_path)
        tracemalloc.start()
        t0 = time.perf_counter()
        g = hg.build_graph_from_csv(p, gray, cfg.graph, name=p.parent.name,
                                    node_types=tuple(cfg.features.node_types))
        dt = time.perf_counter() - t0
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        hg.validate(g)
        dest = out / "graphs" / f"{p.parent.name}.json"
        dest.parent.mkdir(parents=True, exist_ok=True)
        hg.serialize(g, dest)
        st = hg.graph_stats(g)
        rows.append({"graph": g.name, "nodes": st.total_nodes, "edges": st.total_edges,
                     "nodes_by_type": st.nodes, "edges_by_type": st.edges, "construction_seconds": dt, "peak_memory_bytes": peak})
    write_json(out / "build_graph.json", rows)
    return {"graphs": rows}


def _train_hiegnet(cfg, spec, task, out: Path) -> dict:
    res = T.fit(spec, task, cfg.train)
    m = T.evaluate(T.predict_task(spec, res.params, task, "test"), task.labels("test"), spec.n_classes)
    M.save_checkpoint(out / "model" / "checkpoint.hgp", spec, res.params,
                      {"seed": cfg.train.seed, "best_epoch": res.best_epoch})
    write_csv(out / "model" / "loss_curve.csv",
              [{"epoch": e, "train_loss": l, "val_macro_f1": v}
               for e, (l, v) in enumerate(zip(res.loss_curve, res.val_curve))])
    return metrics_record("hiegnet", cfg.train.seed, m, {"best_epoch": res.best_epoch, "epochs_run": res.epochs_run,
                                                         "best_val_f1": res.best_val_f1})


def _rf_rows(task: T.Task) -> tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([task.features("train"), task.features("val")]),
            np.concatenate([task.labels("train"), task.labels("val")]))


def _train_rf(cfg, task, out: Path) -> dict:
    X, y = _rf_rows(task)
    forest = B.rf_fit(X, y, replace(cfg.baseline, seed=cfg.train.seed), n_classes=3)
    forest.save(out / "model" / "forest.json")
    m = T.evaluate(B.rf_predict(forest, task.features("test"))[0], task.labels("test"))
    return metrics_record("rf", cfg.train.seed, m, {"oob_accuracy": B.oob_accuracy(forest, X, y)})


def cmd_train(cfg: C.RunConfig, out: Path, args) -> dict:
    spec = cfg.model_spec()
    train_p, test_p = split_graphs(cfg, out)
    task = make_task(cfg, spec, train_p, test_p)
    (out / "model").mkdir(parents=True, exist_ok=True)
    write_json(out / "model" / "scaler.json", task.scaler.to_dict())
    write_json(out / "model" / "split.json", {"mode": cfg.data.split, "train_graphs": [str(p) for p in train_p],
                                              "test_graphs": [str(p) for p in test_p], **T.split_record(task)})
    if args.n_seeds > 1:
        seeds = [cfg.train.seed + k for k in range(args.n_seeds)]
        if args.model == "rf":
            X, y = _rf_rows(task)
            res = [T.evaluate(B.rf_predict(B.rf_fit(X, y, replace(cfg.baseline, seed=s), 3),
                                           task.features("test"))[0], task.labels("test")) for s in seeds]
            rm = T.summarize(seeds, res)
        else:
            rm = T.multi_seed(spec, task, cfg.train, seeds=seeds, n_jobs=args.threads)
        rec = {"model": args.model, **rm.to_dict()}
        write_json(out / "metrics" / f"multi_seed_{args.model}.json", rec)
        write_csv(out / "metrics" / f"per_seed_{args.model}.csv", rm.per_seed)
        return {"mean": rm.mean, "std": rm.std}
    rec = _train_rf(cfg, task, out) if args.model == "rf" else _train_hiegnet(cfg, spec, task, out)
    write_json(out / "metrics" / f"train_{args.model}.json", rec)
    return {"test_macro_f1": rec["test"]["macro_f1"]}


def cmd_eval(cfg: C.RunConfig, out: Path, args) -> dict:
    split_path = out / "model" / "split.json"
    if not split_path.exists():
        raise DataError(f"no trained model in {out} (missing {split_path})")
    split = json.loads(split_path.read_text())
    scaler = hg.GraphScaler.from_dict(json.loads((out / "model" / "scaler.json").read_text()))
    raw = load_graphs([Path(p) for p in split["train_graphs"] + split["test_graphs"]])
    if args.model == "rf":
        forest = B.Forest.load(out / "model" / "forest.json")
        task = T.restore_task(raw, split, scaler, None)
        m = T.evaluate(B.rf_predict(forest, task.features("test"))[0], task.labels("test"))
        seed = forest.spec.seed
    else:
        spec, P, meta = M.load_checkpoint(out / "model" / "checkpoint.hgp")
        task = T.restore_task(raw, split, scaler, spec)
        m = T.evaluate(T.predict_task(spec, P, task, "test"), task.labels("test"), spec.n_classes)
        seed = meta.get("seed")
    rec = metrics_record(args.model, seed, m)
    write_json(out / "metrics" / f"eval_{args.model}.json", rec)
    return {"test_macro_f1": m.macro_f1}


def cmd_gridsearch(cfg: C.RunConfig, out: Path, args) -> dict:
    graphs = load_graphs(graph_paths(cfg, out))
    rows = T.grid_search(cfg.model_spec(), cfg.search.space, graphs, cfg.train, cfg.search.k, cfg.train.seed,
                         n_jobs=args.threads)
    write_json(out / "metrics" / "gridsearch.json", rows)
    write_csv(out / "metrics" / "gridsearch.csv", rows)
    return {"best": rows[0] if rows else None, "n_configs": len(rows)}


def cmd_ablate(cfg: C.RunConfig, out: Path, args) -> dict:
    spec = cfg.model_spec()
    task = make_task(cfg, spec, *split_graphs(cfg, out))
    n = args.n_seeds if args.n_seeds > 1 else cfg.train.n_seeds
    rows = T.edge_ablation_study(spec, task, cfg.train, n_seeds=n,
                                 seeds=[cfg.train.seed + k for k in range(n)], n_jobs=args.threads)
    write_json(out / "metrics" / "ablation.json", rows)
    write_csv(out / "metrics" / "ablation.csv", rows)
    return {"ablation": rows}


def _instances(path: Path) -> list[morph.InstanceMask]:
    """Masks from a directory of PGM masks with sidecars, a single such mask, or a label image (0 = background)."""
    if not path.exists():
        raise DataError(f"missing masks {path}")
    if path.is_dir():
        return [morph.InstanceMask.load(p) for p in sorted(path.glob("*.pgm"))]
    img = pnm.read_pgm(path)
    has_sidecar = pnm.sidecar_path(path).exists()
    if img.max() <= 1 and has_sidecar:
        return [morph.InstanceMask.load(path)]
    origin, res = pnm.read_sidecar(path) if has_sidecar else ((0.0, 0.0), 1.0)
    out = []
    for v, sl in enumerate(ndimage.find_objects(img.astype(np.int64)), start=1):
        if sl is None:
            continue
        bm = np.pad(img[sl] == v, 1)
        ox = origin[0] + (sl[1].start - 1) * res
        oy = origin[1] + (sl[0].start - 1) * res
        out.append(morph.InstanceMask(bm, (ox, oy), res))
    return out


def cmd_seg_eval(cfg: C.RunConfig, out: Path, args) -> dict:
    if not args.truth:
        raise C.ConfigError("seg-eval needs --truth")
    paths = []
    for t in args.truth:
        paths.extend(sorted(Path(p) for p in glob.glob(t)) if glob.has_magic(t) else [Path(t)])
    if not paths:
        raise DataError(f"no truth masks match {args.truth}")
    truth = [m for p in paths for m in _instances(p)]
    if args.channel:
        ch = Path(args.channel)
        if not ch.exists():
            raise DataError(f"missing channel raster {ch}")
        pred = morph.contour_segment(morph.Raster.load(ch), args.intensity, args.area)
    elif args.pred:
        pred = _instances(Path(args.pred))
    else:
        raise C.ConfigError("seg-eval needs --channel or --pred")
    score = T.seg_ap_auc(pred, truth)
    rec = {"n_pred": len(pred), "n_truth": len(truth), "thresholds": score.thresholds, "ap": score.ap,
           "auc": score.auc}
    if args.channel:
        rec.update(intensity=args.intensity, area=args.area)
    write_json(out / "metrics" / "seg_eval.json", rec)
    write_csv(out / "metrics" / "seg_eval.csv", [{"iou": t, "ap": a} for t, a in zip(score.thresholds, score.ap)])
    return {"auc": score.auc, "n_pred": len(pred), "n_truth": len(truth)}


def cmd_render(cfg: C.RunConfig, out: Path, args) -> dict:
    paths = [Path(p) for p in args.graph] if args.graph else graph_paths(cfg, out)
    radii = {"r_gg": cfg.graph.eps_glom, "R_ig": cfg.graph.eps_immune_glom, "R_i": cfg.graph.eps_immune}
    files = []
    for p in paths:
        g = hg.deserialize(p)
        dest = out / "render" / f"{p.stem}.svg"
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(R.render_svg(g, radii, title=g.name))
        files.append(str(dest.relative_to(out)))
    return {"svg": files}


def cmd_bench(cfg: C.RunConfig, out: Path, args) -> dict:
    spec = cfg.model_spec()
    rows = []
    if args.layout == "graphs":
        built = out / "build_graph.json"
        known = {r["graph"]: r for r in json.loads(built.read_text())} if built.exists() else {}
        for p in graph_paths(cfg, out):
            g = hg.deserialize(p)
            rec = known.get(g.name)
            if rec:  # construction numbers are not stored in graph files
                g.meta.update(construction_seconds=rec["construction_seconds"],
                              peak_memory_bytes=rec["peak_memory_bytes"])
            rows.append(BN.bench_graph(g, spec, args.epochs))
    elif args.layout == "large":
        L = BN.LARGE_LAYOUT
        rows.append(BN.bench_layout("large", BN.uniform_layout(L["n_glom"], L["n_immune"], L["spacing"],
                                                               cfg.train.seed), cfg.graph, spec, args.epochs))
    else:
        for name, lay in BN.scaling_layouts(seed=cfg.train.seed):
            rows.append(BN.bench_layout(name, lay, cfg.graph, spec, args.epochs))
    table = BN.format_table(rows)
    print(table, file=sys.stderr)
    recs = [r.to_dict() for r in rows]
    write_json(out / "bench" / "bench.json", {"rows": recs, "max_rss_bytes": BN.max_rss_bytes()})
    write_csv(out / "bench" / "bench.csv", [{k: v for k, v in r.items() if not isinstance(v, dict)} for r in recs])
    if len(rows) >= 2 and all(r.epoch_s is not None for r in rows):
        slope, icept, r2 = BN.linear_fit([r.edges for r in rows], [r.epoch_s for r in rows])
        write_json(out / "bench" / "epoch_vs_edges.json", {"slope": slope, "intercept": icept, "r2": r2})
    return {"rows": len(rows)}


COMMANDS = {
    "synth": cmd_synth, "build-graph": cmd_build_graph, "train": cmd_train, "eval": cmd_eval,
    "gridsearch": cmd_gridsearch, "ablate": cmd_ablate, "seg-eval": cmd_seg_eval, "render": cmd_render,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="overrides train.seed, synth.seed and baseline.seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap for BLAS and parallel jobs")
    common.add_argument("--out", help="run directory (default: output.dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="hiegnet", description=__doc__.splitlines()[0], parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="generate synthetic slides")
    p.add_argument("--stains", action="store_true", help="also write immune stain channels")
    sub.add_parser("build-graph", parents=[common], help="node CSV + masks -> serialized graphs")
    for name in ("train", "eval"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--model", choices=("hiegnet", "rf"), default="hiegnet")
        if name == "train":
            p.add_argument("--n-seeds", type=int, default=1, help=">1: multi-seed evaluation instead of one fit")
    sub.add_parser("gridsearch", parents=[common], help="k-fold CV over search.space")
    p = sub.add_parser("ablate", parents=[common], help="edge-type group ablation")
    p.add_argument("--n-seeds", type=int, default=0, help="seeds per setting (default: train.n_seeds)")
    p = sub.add_parser("seg-eval", parents=[common], help="AP over IoU thresholds and its AUC")
    p.add_argument("--truth", nargs="+", help="mask directories, single masks, label images or glob patterns")
    p.add_argument("--pred", help="predicted masks (directory or label image)")
    p.add_argument("--channel", help="stain channel to segment with the threshold segmenter")
    p.add_argument("--intensity", type=float, default=128.0)
    p.add_argument("--area", type=int, default=40)
    p = sub.add_parser("render", parents=[common], help="SVG overlay of graphs")
    p.add_argument("--graph", nargs="*", help="graph files (default: the run's graphs)")
    p = sub.add_parser("bench", parents=[common], help="construction and training cost table")
    p.add_argument("--layout", choices=("scaling", "large", "graphs"), default="scaling")
    p.add_argument("--epochs", type=int, default=2, help="timed training epochs per graph (0: skip)")
    return ap


def resolve_config(args) -> tuple[C.RunConfig, Path]:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed), synth=replace(cfg.synth, seed=args.seed),
                      baseline=replace(cfg.baseline, seed=args.seed))
    if args.threads < 1:
        raise C.ConfigError("--threads must be >= 1")
    out = Path(args.out or cfg.output.dir)
    cfg = replace(cfg, output=replace(cfg.output, dir=str(out)))
    return cfg, out


def _error(code: int, exc: BaseException, out: Path | None) -> int:
    kind = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_NUMERIC: "numeric"}[code]
    rec = {"error": {"kind": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}}
    offset = getattr(exc, "offset", None)
    if offset is not None:
        rec["error"]["offset"] = offset
    print(f"hiegnet: {kind} error: {exc}", file=sys.stderr)
    print(json.dumps(rec))
    if out is not None and out.is_dir():
        write_json(out / "error.json", rec)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        cfg, out = resolve_config(args)
        out.mkdir(parents=True, exist_ok=True)
        C.save(cfg, out / "config.json")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            result = COMMANDS[args.command](cfg, out, args)
    except C.ConfigError as exc:
        return _error(EXIT_CONFIG, exc, out)
    except dm.NumericError as exc:
        return _error(EXIT_NUMERIC, exc, out)
    except (DataError, hg.GraphError, pnm.PNMError, sd.SynthError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _error(EXIT_DATA, exc, out)
    except ValueError as exc:
        # remaining validation failures come from inputs (labels, shapes, splits)
        return _error(EXIT_DATA, exc, out)
    print(json.dumps({"command": args.command, "out": str(out), **result}, sort_keys=True, default=str))
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
