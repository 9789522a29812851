"""Sequence-length scaling measurements: selective scan vs attention.

Times the selective-scan recurrence against a quadratic softmax-attention
reference over a geometric ladder of sequence lengths, then fits the
growth exponent of each in log-log space. The scan should come out
near-linear, attention near-quadratic.
"""

from __future__ import annotations

import csv
import time

import numpy as np

from . import tensor as T
from .errors import ContractError
from .ssm import init_ssm_params, selective_params, selective_scan

DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096, 8192)
BENCH_DIM = 32
BENCH_STATE = 16
_ATTN_ROW_BLOCK = 256  # cap the live score matrix at block x L


def _time_reps(fn, reps: int) -> tuple[float, float]:
    """(mean_ms, std_ms) over reps calls, after one untimed warmup."""
    fn()
    times = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        fn()
        times[i] = time.perf_counter() - t0
    return float(times.mean() * 1e3), float(times.std() * 1e3)


def scan_workload(length: int, dim: int = BENCH_DIM,
                  state: int = BENCH_STATE, seed: int = 0):
    """Closure running one selective-scan forward on (1, length, dim)."""
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.standard_normal((1, length, dim)).astype(np.float32))
    params = init_ssm_params(dim, state, seed=seed)

    def run():
        with T.no_grad():
            disc, c_t = selective_params(x, params)
            return selective_scan(x, disc, c_t)

    return run


def attention_workload(length: int, dim: int = BENCH_DIM, seed: int = 0):
    """Closure running causal softmax attention, blocked over query rows.

    Blocking keeps memory bounded but does not change the O(L^2 d)
    arithmetic, so the fitted exponent still reflects the quadratic
    cost.
    """
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((length, dim)).astype(np.float32)
    k = rng.standard_normal((length, dim)).astype(np.float32)
    v = rng.standard_normal((length, dim)).astype(np.float32)
    scale = 1.0 / np.sqrt(dim)

    def run():
        out = np.empty_like(v)
        for lo in range(0, length, _ATTN_ROW_BLOCK):
            hi = min(lo + _ATTN_ROW_BLOCK, length)
            scores = (q[lo:hi] @ k.T) * scale
            mask = np.arange(length)[None, :] > np.arange(lo, hi)[:, None]
            scores[mask] = -np.inf
            scores -= scores.max(axis=-1, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=-1, keepdims=True)
            out[lo:hi] = scores @ v
        return out

    return run


def measure(lengths=DEFAULT_LENGTHS, reps: int = 5, dim: int = BENCH_DIM,
            log=None) -> list[dict]:
    """Time both kernels at every length; rows of kernel/L/mean_ms/std_ms."""
    if reps < 2:
        raise ContractError(f"need at least 2 reps, got {reps}")
    rows = []
    for kernel, factory in (("scan", scan_workload),
                            ("attention", attention_workload)):
        for length in lengths:
            mean_ms, std_ms = _time_reps(factory(int(length)), reps)
            rows.append({"kernel": kernel, "L": int(length),
                         "mean_ms": mean_ms, "std_ms": std_ms})
            if log is not None:
                log(f"{kernel:10s} L={length:5d}  {mean_ms:9.2f} ms "
                    f"± {std_ms:.2f}")
    return rows


def fit_slope(rows: list[dict], kernel: str) -> float:
    """Least-squares exponent of mean time vs length in log-log space."""
    pts = [(r["L"], r["mean_ms"]) for r in rows if r["kernel"] == kernel]
    if len(pts) < 2:
        raise ContractError(f"no measurements for kernel {kernel!r}")
    ls, ts = zip(*pts)
    slope, _ = np.polyfit(np.log2(ls), np.log2(ts), 1)
    return float(slope)


def write_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["kernel", "L", "mean_ms",
                                               "std_ms"])
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "mean_ms": f"{r['mean_ms']:.4f}",
                             "std_ms": f"{r['std_ms']:.4f}"})
