"""Within-slide vs between-slide macro-F1 on neighbor_class slides."""
import time

from _common import config, dump, parser
from hiegnet import experiments as E

args = parser(__doc__).parse_args()
t0 = time.time()
r = E.generalisation(config(args))
out = {"within": {k: r["within"][k] for k in ("hiegnet", "rf")},
       "between": {k: r["between"][k] for k in ("hiegnet", "rf")},
       "hiegnet_drop": r["hiegnet_drop"], "rf_drop": r["rf_drop"]}
for part in ("within", "between"):
    for m in ("hiegnet", "rf"):
        out[f"{part}_{m}_f1"] = r[part][m].mean["macro_f1"]
dump(args, "generalisation", out, t0)
