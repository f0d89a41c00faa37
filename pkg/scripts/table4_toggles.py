"""Run the EPEM x DSFFN on/off matrix end to end on one seeded fixture.

    python3 scripts/table4_toggles.py [--seed 0] [--proposals 8]

Reports loss components, parameter totals and wall time per setting. The
parameters are untrained, so losses only show that each setting runs.
"""
import argparse
import csv
import sys
import time

from textmamba import RunConfig, model_forward, param_counts
from textmamba.fixtures import generate_fixtures, params_from_tensors, targets_from_tensors


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--proposals", type=int, default=8)
    args = ap.parse_args()
    base = RunConfig(num_proposals=args.proposals, seed=args.seed)
    tensors = generate_fixtures(args.seed, base)
    targets = targets_from_tensors(base, tensors)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["epem", "dsffn", "params", "loss_total", "loss_cls", "loss_seg", "loss_reg", "seconds"])
    for epem in (False, True):
        for dsffn in (False, True):
            cfg = base.replace(enable_epem=epem, enable_dsffn=dsffn)
            params = params_from_tensors(cfg, tensors)
            t = time.perf_counter()
            out = model_forward(tensors["image"], params, cfg, targets)
            dt = time.perf_counter() - t
            l = out.loss
            w.writerow([int(epem), int(dsffn), param_counts(cfg)["total"], f"{l.total:.6f}",
                        f"{l.cls:.6f}", f"{l.seg:.6f}", f"{l.reg:.6f}", f"{dt:.2f}"])


if __name__ == "__main__":
    main()
