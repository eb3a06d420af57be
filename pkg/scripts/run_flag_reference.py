#!/usr/bin/env python3
"""Reference solve of the flag benchmark.

Builds the accurately-resolved north boundary (seven rounds of boundary
refinement), parameterizes the interior, solves the Poisson problem on the
dense fixed solution space, and reports the reference functional value
J_E together with the boundary dimension.  Artifacts (summary CSV, control
net, boundary polylines, field samples) land in the output directory.

Usage: run_flag_reference.py [OUTDIR]
"""
import sys

from thbdefeat.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "out/flag_reference"
    sys.exit(main(["reference", "flag", "--out", out]))
