"""Sequential vs parallel selective-scan timing."""
from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass

import numpy as np

from .s6 import init_s6, selective_scan_parallel, selective_scan_sequential

CSV_FIELDS = ["length", "seq_total_s", "seq_ns_per_token", "par_total_s", "par_ns_per_token",
              "max_rel_dev", "threads", "dtype"]


@dataclass
class BenchRow:
    length: int
    seq_total_s: float
    seq_ns_per_token: float
    par_total_s: float
    par_ns_per_token: float
    max_rel_dev: float
    threads: int
    dtype: str


def max_rel_dev(ref: np.ndarray, other: np.ndarray) -> float:
    """Largest absolute deviation scaled by the largest reference magnitude."""
    ref = ref.astype(np.float64)
    scale = max(float(np.abs(ref).max()), np.finfo(np.float64).tiny)
    return float(np.abs(other.astype(np.float64) - ref).max() / scale)


def _best(fn, reps):
    best, out = float("inf"), None
    for _ in range(reps):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def bench_scan(lengths, state_dim: int = 16, channels: int = 32, reps: int = 3,
               dtype=np.float32, seed: int = 0, workers: int | None = None) -> list[BenchRow]:
    lengths = [int(v) for v in lengths]
    if lengths != sorted(lengths) or not lengths or lengths[0] < 1:
        raise ValueError("lengths must be positive and sorted ascending")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    workers = workers or os.cpu_count() or 1
    rng = np.random.default_rng(seed)
    params = init_s6(rng, channels, state_dim, dtype)
    rows = []
    for L in lengths:
        x = rng.standard_normal((L, channels)).astype(dtype)
        t_seq, y_seq = _best(lambda: selective_scan_sequential(x, params), reps)
        t_par, y_par = _best(lambda: selective_scan_parallel(x, params, workers=workers), reps)
        rows.append(BenchRow(L, t_seq, t_seq / L * 1e9, t_par, t_par / L * 1e9,
                             max_rel_dev(y_seq, y_par), workers, np.dtype(dtype).name))
    return rows


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([r.length, f"{r.seq_total_s:.6f}", f"{r.seq_ns_per_token:.1f}",
                    f"{r.par_total_s:.6f}", f"{r.par_ns_per_token:.1f}",
                    f"{r.max_rel_dev:.3e}", r.threads, r.dtype])
    return buf.getvalue()
