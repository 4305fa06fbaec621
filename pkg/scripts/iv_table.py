#!/usr/bin/env python3
"""Print recoverable induction-variable counts before and after the protection passes."""

from __future__ import annotations

import argparse

from crashlab.campaign import format_iv_stats, report_iv_stats


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("kernels", nargs="*", help="bundled kernel names (default: all)")
    ap.add_argument("--format", choices=("text", "csv"), default="text")
    args = ap.parse_args(argv)
    print(format_iv_stats(report_iv_stats(args.kernels or None), args.format), end="")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
