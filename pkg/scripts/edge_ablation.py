"""Retrain with each edge-type group removed on immune_density slides."""
import time

from _common import config, dump, parser
from hiegnet import experiments as E

args = parser(__doc__).parse_args()
t0 = time.time()
rows = E.edge_ablation(config(args))
for r in rows:
    print(f"{r['removed']:>6}  f1 {r['macro_f1']:.4f}  delta {r['delta']:+.4f}")
dump(args, "edge_ablation", {"rows": rows}, t0)
