"""Run the seven-variant ablation grid on the desk world and save results.

    python scripts/run_ablation.py [--grid configs/ablation_grid.json] [--out results/ablation]

Equivalent to ``dasid -v ablate --grid ... --out ...``.  The other scripts in this
directory read ``<out>/ablation.json``.
"""

import argparse
import sys

from dasid.cli import run


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grid", default="configs/ablation_grid.json")
    p.add_argument("--out", default="results/ablation")
    args = p.parse_args()
    return run(["-v", "ablate", "--grid", args.grid, "--out", args.out])


if __name__ == "__main__":
    sys.exit(main())
