"""CTR-probe AUC per variant against the id-only baseline, from a saved ablation run.

    python scripts/probe_ordering.py [results/ablation/ablation.json]
"""

import json
import sys

import numpy as np

from dasid.experiments import VARIANTS


def main(path: str = "results/ablation/ablation.json") -> None:
    res = json.load(open(path, encoding="utf-8"))
    base = res["baseline_probe_auc_median"]
    print(f"{'features':<18}{'median AUC':>12}{'vs id-only':>12}")
    print(f"{'id-only':<18}{base:>12.4f}{0.0:>+12.4f}")
    for v in VARIANTS:
        vals = [r["probe_auc"] for r in res["rows"] if r["variant"] == v]
        if vals:
            m = float(np.median(vals))
            print(f"{v:<18}{m:>12.4f}{m - base:>+12.4f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
