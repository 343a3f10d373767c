"""Sparse versus dense attention benchmark on random inputs.

For each length N the encoder stack runs one forward and one backward pass
(gradients for the input and every layer parameter) on a random N x d_model
input, once with the gather-based sparse kernel and once with the dense
masked reference.  Pair counts are deterministic; wall times are not.
"""

import ctypes
import ctypes.util
import logging
import time
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .attention import LayerParams, build_mask, encoder_stack

log = logging.getLogger(__name__)

CSV_COLUMNS = ("N", "pairs", "pairs_dense", "t_sparse", "t_dense")

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_tuned = False


def tune_allocator():
    """Keep freed multi-megabyte buffers inside the process (glibc only).

    By default glibc hands large blocks back to the kernel on free, so every
    fresh activation or gradient array is faulted in page by page.  On
    systems with expensive page faults that dominates small-matrix timings.
    Returns True when the tuning was applied.
    """
    global _tuned
    if _tuned:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 32 * 1024 * 1024) == 1
        ok = ok and libc.mallopt(_M_TRIM_THRESHOLD, 256 * 1024 * 1024) == 1
    except (OSError, AttributeError):
        return False
    _tuned = ok
    return ok


def random_tree_adjacency(n, rng):
    """Symmetric adjacency (with self-loops) of a random recursive tree."""
    adj = np.eye(n, dtype=bool)
    if n > 1:
        child = np.arange(1, n)
        parent = (rng.random(n - 1) * child).astype(np.intp)
        adj[child, parent] = True
        adj[parent, child] = True
    return adj


def _step(e, layers, mask, config, path):
    x = T.Tensor(e, requires_grad=True)
    out = encoder_stack(x, layers, mask, config, path=path)
    T.sum_all(out).backward()
    for layer in layers:
        for _, p in layer.named(""):
            p.grad = None


def _median_time(fn, repeats):
    fn()  # warm-up: caches, allocator arenas
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_length(n, config, repeats=5, seed=0, timed=True):
    """One CSV row (as a dict) for sequence length ``n``."""
    rng = np.random.default_rng(seed)
    adj = random_tree_adjacency(n, rng)
    mask = build_mask(n, config, adj)
    row = {"N": n, "pairs": mask.pairs, "pairs_dense": n * n, "t_sparse": None, "t_dense": None}
    if not timed:
        return row
    layers = [LayerParams.init(config, rng) for _ in range(config.layers)]
    e = rng.standard_normal((n, config.d_model))
    for path in ("sparse", "dense"):
        row[f"t_{path}"] = _median_time(lambda: _step(e, layers, mask, config, path), repeats)
    return row


def run_bench(lengths, config, repeats=5, seed=0, patterns=None, threads=1):
    """Rows for every length, timed with BLAS limited to ``threads`` threads."""
    if patterns is not None:
        config = replace(config, patterns=list(patterns)).validate()
    tune_allocator()
    rows = []
    with threadpool_limits(threads):
        for n in lengths:
            if n < 1:
                raise ValueError("lengths must be >= 1")
            rows.append(bench_length(n, config, repeats, seed))
            log.info("bench N=%d done", n)
    return rows


def rows_to_csv(rows):
    lines = [",".join(CSV_COLUMNS)]
    for r in rows:
        lines.append(",".join("" if r[c] is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]))
                              for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"
