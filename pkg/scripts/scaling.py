"""Epoch time vs edge count and the large-graph construction benchmark."""
import argparse
import json
import time
from pathlib import Path

from hiegnet import bench as BN

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--epochs", type=int, default=1)
ap.add_argument("--skip-large", action="store_true")
ap.add_argument("--out", default="runs/experiments")
args = ap.parse_args()

t0 = time.time()
rows = [BN.bench_layout(name, lay, epochs=args.epochs) for name, lay in BN.scaling_layouts()]
slope, icept, r2 = BN.linear_fit([r.edges for r in rows], [r.epoch_s for r in rows])
if not args.skip_large:
    L = BN.LARGE_LAYOUT
    rows.append(BN.bench_layout("large", BN.uniform_layout(L["n_glom"], L["n_immune"], L["spacing"])))
print(BN.format_table(rows))
print(f"epoch_s = {slope:.3e} * edges + {icept:.3f}   R^2 = {r2:.4f}")
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
(out / "scaling.json").write_text(json.dumps(
    {"rows": [r.to_dict() for r in rows], "slope": slope, "intercept": icept, "r2": r2,
     "max_rss_bytes": BN.max_rss_bytes(), "seconds": time.time() - t0}, indent=2))
