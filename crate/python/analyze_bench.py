#!/usr/bin/env python3
"""Summarize bench CSV output.

Usage: python3 python/analyze_bench.py rows.csv [more.csv ...]

Groups rows by (experiment, mode), prints the metric sweep, and fits a
line to bytes-vs-param so the flat/linear trends are visible at a glance.
"""

import csv
import sys
from collections import defaultdict

EXPECTED_HEADER = [
    "experiment",
    "mode",
    "param",
    "metadata_bytes",
    "blob_bytes",
    "requests",
    "elapsed_ms",
    "run",
]


def linear_fit(points):
    n = len(points)
    if n < 2:
        return 0.0, points[0][1] if points else 0.0
    sx = sum(p[0] for p in points)
    sy = sum(p[1] for p in points)
    sxx = sum(p[0] * p[0] for p in points)
    sxy = sum(p[0] * p[1] for p in points)
    denom = n * sxx - sx * sx
    if denom == 0:
        return 0.0, sy / n
    b = (n * sxy - sx * sy) / denom
    a = (sy - b * sx) / n
    return b, a


def load(paths):
    rows = []
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != EXPECTED_HEADER:
                sys.exit(f"{path}: unexpected header {reader.fieldnames}")
            for row in reader:
                rows.append(
                    {
                        "experiment": row["experiment"],
                        "mode": row["mode"],
                        "param": int(row["param"]),
                        "metadata_bytes": int(row["metadata_bytes"]),
                        "blob_bytes": int(row["blob_bytes"]),
                        "requests": int(row["requests"]),
                        "elapsed_ms": int(row["elapsed_ms"]),
                        "run": int(row["run"]),
                    }
                )
    return rows


def main(paths):
    rows = load(paths)
    if not rows:
        sys.exit("no rows")
    groups = defaultdict(list)
    for row in rows:
        groups[(row["experiment"], row["mode"])].append(row)

    for (experiment, mode), group in sorted(groups.items()):
        group.sort(key=lambda r: (r["param"], r["run"]))
        points = [(r["param"], r["metadata_bytes"] + r["blob_bytes"]) for r in group]
        slope, intercept = linear_fit(points)
        flat = all(p[1] == points[0][1] for p in points)
        print(f"{experiment} / {mode}")
        for r in group:
            total = r["metadata_bytes"] + r["blob_bytes"]
            print(
                f"  param={r['param']:>6}  bytes={total:>12}"
                f"  requests={r['requests']:>7}  elapsed={r['elapsed_ms']:>6} ms  run={r['run']}"
            )
        trend = "flat" if flat else f"~ {slope:.1f} bytes/param + {intercept:.0f}"
        print(f"  trend: {trend}")
        print()


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    main(sys.argv[1:])
