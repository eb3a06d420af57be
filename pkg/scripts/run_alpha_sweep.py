#!/usr/bin/env python3
"""Marking-fraction sweep on the flag benchmark.

Runs the defeaturing loop for alpha in {0.1, 0.3, 0.5, 0.7} with the
preset tolerance and writes one run-record CSV per value.  Larger alpha
marks fewer directions per iteration, so iteration counts grow while the
final boundary dimension shrinks slightly.

Usage: run_alpha_sweep.py [OUTDIR]
"""
import os
import sys

from thbdefeat.cli import main

if __name__ == "__main__":
    base = sys.argv[1] if len(sys.argv) > 1 else "out/alpha_sweep"
    status = 0
    for alpha in (0.1, 0.3, 0.5, 0.7):
        out = os.path.join(base, f"alpha_{alpha:g}")
        print(f"=== alpha = {alpha:g} -> {out}")
        status |= main(["defeature", "flag", "--alpha", str(alpha),
                        "--out", out])
    sys.exit(status)
