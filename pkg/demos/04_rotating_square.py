"""
A square that rotates while its centre travels on a circle (m = d = 2).

Runs the command line entry point the way a user would and reads back the
CSV tables. Shrunk to 2000 paths so it finishes in under a minute.
"""

import csv
import tempfile
from pathlib import Path

from rbsde.cli import main

out = Path(tempfile.mkdtemp()) / "rotating"
status = main(["compare", "rotating-box-2d", "--out", str(out), "--paths", "2000", "--steps", "128"])
print("exit status", status)

with open(out / "checks.csv", newline="") as f:
    for row in csv.DictReader(f):
        if row["passed"] != "report-only":
            print(f"{row['scheme']:>10} {row['parameter']:>4} {row['check']:<20} {float(row['statistic']):.3e}")

with open(out / "convergence.csv", newline="") as f:
    for row in csv.DictReader(f):
        print("cross-scheme dY", row["delta_Y"], "dZ", row["delta_Z"], "dK", row["delta_K"])
