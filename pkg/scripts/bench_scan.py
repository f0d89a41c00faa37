"""Sequential vs parallel selective scan over growing lengths; prints CSV and the scaling ratio.

    python3 scripts/bench_scan.py [--lengths 256,512,1024,2048,4096] [--reps 3]
"""
import argparse
import sys

from textmamba.bench import bench_scan, rows_to_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", default="256,512,1024,2048,4096")
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--state", type=int, default=16)
    ap.add_argument("--channels", type=int, default=32)
    args = ap.parse_args()
    lengths = [int(v) for v in args.lengths.split(",")]
    rows = bench_scan(lengths, args.state, args.channels, args.reps)
    sys.stdout.write(rows_to_csv(rows))
    growth = lengths[-1] / lengths[0]
    ratio = rows[-1].seq_total_s / rows[0].seq_total_s
    print(f"# sequential time grew {ratio:.1f}x for a {growth:.0f}x longer sequence", file=sys.stderr)


if __name__ == "__main__":
    main()
