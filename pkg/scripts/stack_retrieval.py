"""Retrieval AUC as alignment views are stacked, from a saved ablation run.

    python scripts/stack_retrieval.py [results/ablation/ablation.json]
"""

import json
import sys

import numpy as np

from dasid.experiments import STACK

STEP_NAMES = {"no-align": "none", "debiased": "+dual u2i", "minus-cooccur": "+dual view", "full": "+co-occurrence"}


def main(path: str = "results/ablation/ablation.json") -> None:
    rows = json.load(open(path, encoding="utf-8"))["rows"]
    seeds = sorted({r["seed"] for r in rows})
    for task in ("cu_int_zi", "zu_ci_pro"):
        print(f"\nAUC <{task}>  (per seed {seeds}, then median)")
        prev = None
        for v in STACK:
            vals = [r[f"auc_{task}"] for r in rows if r["variant"] == v]
            med = float(np.median(vals))
            delta = "" if prev is None else f"  {med - prev:+.4f}"
            print(f"  {STEP_NAMES[v]:<16} " + " ".join(f"{x:.4f}" for x in vals) + f"   median {med:.4f}{delta}")
            prev = med


if __name__ == "__main__":
    main(*sys.argv[1:])
