#!/usr/bin/env python3
"""Aggressive defeaturing of the flag benchmark (tiny marking fraction).

Runs the adaptive loop with alpha = 1e-7 — every boundary direction with a
nonzero gradient is marked — stopping once the modelling-error estimate
drops below 1e-5.  Writes the run-record CSV and per-iteration mesh dumps.

Usage: run_flag_defeature.py [OUTDIR]
"""
import sys

from thbdefeat.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "out/flag_defeature"
    sys.exit(main(["defeature", "flag", "--alpha", "1e-7",
                   "--epsilon", "1e-5", "--out", out]))
