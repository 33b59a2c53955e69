"""Grid search over (alpha, Q) for each lag of the composite estimator and print the optimum table."""

import argparse
import csv
from pathlib import Path

from rotfda.cli import main

HERE = Path(__file__).resolve().parent
DEFAULT = HERE.parent / "configs" / "composite_grid.yaml"


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=DEFAULT)
    ap.add_argument("--out", type=Path, default=Path("out/composite"))
    ap.add_argument("--workers", type=int, default=1)
    a = ap.parse_args()
    code = main(["simulate", "--config", str(a.config), "--out", str(a.out), "--workers", str(a.workers)])
    if code:
        raise SystemExit(code)
    with open(a.out / "composite_optimum.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    print(f"{'delta':>6} {'alpha*':>7} {'Q*':>5} {'MISE':>10}")
    for r in rows:
        print(f"{r['delta']:>6} {r['alpha_opt']:>7} {r['Q_opt']:>5} {float(r['mise']):>10.5f}")
