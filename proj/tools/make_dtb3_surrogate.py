#!/usr/bin/env python3
"""Writes fixtures/dtb3.csv: a synthetic stand-in for the FRED DTB3 daily series.

Business days from 1954-01-04, two decimals, "." on a few market holidays.
The level follows a square-root mean-reverting process in percent.
"""
import argparse
import datetime as dt
import math
import random

HOLIDAYS = {(1, 1), (7, 4), (12, 25), (11, 11), (2, 22), (5, 30)}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="fixtures/dtb3.csv")
    ap.add_argument("--rows", type=int, default=2600)
    ap.add_argument("--seed", type=int, default=1954)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    day = dt.date(1954, 1, 4)
    level = 1.33
    kappa, theta, vol, h = 0.35, 2.6, 0.28, 1.0 / 252.0
    lines = ["observation_date,DTB3"]
    while len(lines) <= args.rows:
        if day.weekday() < 5:
            if (day.month, day.day) in HOLIDAYS:
                lines.append(f"{day.isoformat()},.")
            else:
                shock = rng.gauss(0.0, 1.0)
                level += kappa * (theta - level) * h + vol * math.sqrt(max(level, 0.01) * h) * shock
                level = max(level, 0.01)
                lines.append(f"{day.isoformat()},{level:.2f}")
        day += dt.timedelta(days=1)
    with open(args.out, "w") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
