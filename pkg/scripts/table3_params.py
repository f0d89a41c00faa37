"""Parameter growth from adding SS2D to the encoder vs stacking more attention-only blocks.

    python3 scripts/table3_params.py [--channels 16]

Absolute counts depend on the desk-scale widths; only the ordering is meaningful.
"""
import argparse
import csv
import sys

from textmamba import RunConfig, param_counts

SETTINGS = [
    ("6 blocks, attention only", dict(num_blocks=6, enable_ss2d=False)),
    ("6 blocks + SS2D", dict(num_blocks=6)),
    ("18 blocks, attention only", dict(num_blocks=18, enable_ss2d=False)),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, default=16)
    args = ap.parse_args()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["setting", "encoder", "total", "delta_vs_first", "increase_pct"])
    base = None
    for name, kw in SETTINGS:
        c = param_counts(RunConfig(channels=args.channels, **kw))
        base = c["total"] if base is None else base
        w.writerow([name, c["encoder"], c["total"], c["total"] - base,
                    f"{100 * (c['total'] - base) / base:.1f}"])


if __name__ == "__main__":
    main()
