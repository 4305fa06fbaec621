#!/usr/bin/env python3
"""Run the none / care / iterpro campaigns side by side and write their reports.

Example: python3 scripts/run_campaigns.py --runs 5000 --jobs 4 --out results/
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

from crashlab.campaign import MODES, CampaignConfig, run_campaign
from crashlab.kernels import kernel_names


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("kernels", nargs="*", default=None, help="bundled kernel names (default: all)")
    ap.add_argument("--runs", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--modes", default=",".join(MODES))
    ap.add_argument("--target", choices=("all", "addr"), default="all")
    ap.add_argument("--out", type=Path, default=Path("results"))
    args = ap.parse_args(argv)

    args.out.mkdir(parents=True, exist_ok=True)
    names = args.kernels or kernel_names()
    cfg = CampaignConfig(runs=args.runs, seed=args.seed, jobs=args.jobs, target=args.target)
    rates = {}
    for mode in args.modes.split(","):
        start = time.perf_counter()
        rep = run_campaign(names, mode, cfg)
        stem = f"{mode}-{args.target}"
        (args.out / f"{stem}.csv").write_text(rep.to_csv())
        (args.out / f"{stem}.txt").write_text(rep.summary())
        print(rep.summary())
        print(f"[{mode}] {time.perf_counter() - start:.1f}s\n")
        rates[mode] = {k.kernel: k.recovery_rate for k in rep.kernels}

    if "care" in rates and "iterpro" in rates:
        print(f"{'kernel':<16}{'care':>8}{'iterpro':>9}")
        for name in names:
            c, f = rates["care"][name], rates["iterpro"][name]
            print(f"{name:<16}{c:>8.3f}{f:>9.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
