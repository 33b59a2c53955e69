"""Simulate and analyze the partial-replacement alpha grid, then print MISE and sd(ISE) per alpha."""

import argparse
import json
from pathlib import Path

from rotfda.cli import main

HERE = Path(__file__).resolve().parent
DEFAULT = HERE.parent / "configs" / "partial_alpha_grid.yaml"


def run(config: Path, out: Path, workers: int) -> int:
    for cmd in ("simulate", "analyze"):
        code = main([cmd, "--config", str(config), "--out", str(out)] + (["--workers", str(workers)] if cmd == "simulate" else []))
        if code:
            return code
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    print(f"{'alpha':>6} {'MISE':>10} {'sd(ISE)':>10} {'analytic MISE':>14}")
    for c in report["cells"]:
        if c["params"]["method"] != "ht":
            continue
        print(f"{c['params']['alpha']:>6} {c['mise']:>10.5f} {c['sd_ise']:>10.5f} {c['analytic']['mise'] or float('nan'):>14.5f}")
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=DEFAULT)
    ap.add_argument("--out", type=Path, default=Path("out/alpha-grid"))
    ap.add_argument("--workers", type=int, default=1)
    a = ap.parse_args()
    raise SystemExit(run(a.config, a.out, a.workers))
