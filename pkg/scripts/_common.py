import argparse
import json
import logging
import time
from pathlib import Path

from hiegnet import experiments as E


def parser(desc: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=desc)
    ap.add_argument("--n-seeds", type=int, default=20)
    ap.add_argument("--n-glomeruli", type=int, default=500)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/experiments")
    return ap


def config(args) -> E.ExperimentConfig:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    return E.ExperimentConfig(n_glomeruli=args.n_glomeruli, n_seeds=args.n_seeds, n_jobs=args.jobs)


def dump(args, name: str, obj, t0: float) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    obj = {**obj, "seconds": time.time() - t0}
    (out / f"{name}.json").write_text(json.dumps(obj, indent=2, default=lambda o: o.to_dict()))
    print(json.dumps({k: v for k, v in obj.items() if not isinstance(v, (dict, list))}, indent=2))
