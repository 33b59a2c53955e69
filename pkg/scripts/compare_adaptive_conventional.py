"""Adaptive Neyman allocation under partial replacement versus conventional rotation.

Also runs Neyman allocation with the true stratum variances as a reference and
prints the adaptive-to-optimal MISE ratio per alpha.
"""

import argparse
import csv
import dataclasses
from pathlib import Path

from rotfda.allocation import AllocationPolicy
from rotfda.cli import main
from rotfda.config import read_config
from rotfda.harness import run_scenario

HERE = Path(__file__).resolve().parent
CONFIGS = HERE.parent / "configs"


def ht_mise(report):
    return {c["params"]["alpha"]: c["mise"] for c in report.cells if c["params"]["method"] == "ht"}


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("out/adaptive-vs-conventional"))
    ap.add_argument("--workers", type=int, default=1)
    a = ap.parse_args()
    reports = []
    for name in ("adaptive", "conventional"):
        out = a.out / name
        code = main(["simulate", "--config", str(CONFIGS / f"{name}.yaml"), "--out", str(out), "--workers", str(a.workers)])
        if code:
            raise SystemExit(code)
        reports.append(str(out / "report.json"))
    code = main(["compare", *reports, "--out", str(a.out / "comparison")])
    if code:
        raise SystemExit(code)
    with open(a.out / "comparison" / "comparison.csv", newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            if r["method"] == "ht" and r["other"] != r["baseline"]:
                print(f"alpha={r['alpha']}: conventional/adaptive MISE ratio {float(r['mise_ratio']):.3f}, "
                      f"sd(ISE) ratio {float(r['sd_ratio']):.3f}")

    cfg = read_config(CONFIGS / "adaptive.yaml")
    pop = cfg.population.load()
    adaptive = ht_mise(run_scenario(cfg.scenario, pop, workers=a.workers))
    pol = cfg.scenario.allocation
    opt_sc = dataclasses.replace(cfg.scenario, scenario_id="neyman-true",
                                 allocation=AllocationPolicy("neyman", pol.total, floor=pol.floor))
    optimal = ht_mise(run_scenario(opt_sc, pop, workers=a.workers))
    for alpha, v in adaptive.items():
        print(f"alpha={alpha}: adaptive/optimal MISE ratio {v / optimal[alpha]:.3f}")
