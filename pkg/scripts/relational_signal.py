"""HIEGNet vs random forest on immune_density and none synthetic slides."""
import time

from _common import config, dump, parser
from hiegnet import experiments as E

args = parser(__doc__).parse_args()
t0 = time.time()
res = E.relational_signal(config(args))
out = {}
for mode, r in res.items():
    out[mode] = {"hiegnet": r["hiegnet"], "rf": r["rf"]}
    out[f"{mode}_hiegnet_f1"] = r["hiegnet"].mean["macro_f1"]
    out[f"{mode}_rf_f1"] = r["rf"].mean["macro_f1"]
    out[f"{mode}_delta"] = r["delta"]
dump(args, "relational_signal", out, t0)
