"""Deterministic fork-join map and reduce over index ranges.

Work is cut into static chunks whose boundaries depend only on ``(n,
chunk)``. Chunks run on a thread pool (the numeric kernels release the GIL
inside numpy), and results are assembled in chunk order, so outputs never
depend on the worker count or on scheduling. Floating-point reductions use
a fixed pairwise tree over elements and then over chunk partials.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

ENV_WORKERS = "VOXELCAP_WORKERS"
DEFAULT_CHUNK = 4096


@dataclass(frozen=True)
class ParallelConfig:
    """Worker count and chunk size.

    ``workers=0`` means one worker per available CPU. The ``VOXELCAP_WORKERS``
    environment variable, when set, overrides ``workers`` unless
    ``use_env`` is false (the benchmark pins its worker counts this way).
    """

    workers: int = 0
    chunk: int = DEFAULT_CHUNK
    use_env: bool = True

    def __post_init__(self):
        if int(self.workers) < 0:
            raise ValueError("workers must be >= 0")
        if int(self.chunk) < 1:
            raise ValueError("chunk must be >= 1")

    @property
    def effective_workers(self) -> int:
        env = os.environ.get(ENV_WORKERS, "").strip() if self.use_env else ""
        workers = int(env) if env else int(self.workers)
        if workers < 0:
            raise ValueError(f"{ENV_WORKERS} must be >= 0")
        if workers == 0:
            try:
                workers = len(os.sched_getaffinity(0))
            except AttributeError:
                workers = os.cpu_count() or 1
        return max(1, workers)


SERIAL = ParallelConfig(workers=1)


def chunk_bounds(n: int, chunk: int):
    """Static ``[start, stop)`` ranges covering ``range(n)``."""
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def _run(tasks, cfg: ParallelConfig):
    """Evaluate zero-argument callables; results in task order.

    Every task completes before this returns. If several raise, the one
    with the lowest index is re-raised.
    """
    workers = min(cfg.effective_workers, len(tasks))
    if workers <= 1:
        return [t() for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(t) for t in tasks]
        results = []
        first_error = None
        for fut in futures:
            try:
                results.append(fut.result())
            except BaseException as exc:  # noqa: BLE001 - re-raised below in index order
                if first_error is None:
                    first_error = exc
                results.append(None)
    if first_error is not None:
        raise first_error
    return results


def par_map(n: int, f, cfg: ParallelConfig = SERIAL) -> list:
    """``[f(0), ..., f(n-1)]`` computed chunk-parallel."""
    if n < 0:
        raise ValueError("n must be non-negative")

    def task(start, stop):
        return [f(i) for i in range(start, stop)]

    parts = _run([lambda s=s, e=e: task(s, e) for s, e in chunk_bounds(n, cfg.chunk)], cfg)
    return [x for part in parts for x in part]


def par_map_array(n: int, kernel, cfg: ParallelConfig = SERIAL, chunk=None):
    """Vectorised map: ``kernel(start, stop)`` returns the rows for that range.

    The per-chunk arrays are concatenated along axis 0. ``chunk`` overrides
    ``cfg.chunk`` for kernels with a natural block size.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    size = cfg.chunk if chunk is None else int(chunk)
    bounds = chunk_bounds(n, size)
    if not bounds:
        return kernel(0, 0)
    parts = _run([lambda s=s, e=e: kernel(s, e) for s, e in bounds], cfg)
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=0)


def pairwise_reduce(values, combine, identity):
    """Reduce a sequence with a balanced tree whose shape depends on len only."""
    vals = list(values)
    if not vals:
        return identity
    while len(vals) > 1:
        nxt = [combine(vals[i], vals[i + 1]) for i in range(0, len(vals) - 1, 2)]
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]


def par_reduce(n: int, f, combine, identity, cfg: ParallelConfig = SERIAL):
    """Reduce ``f(0..n-1)`` with ``combine``; exact match with the serial tree."""
    if n < 0:
        raise ValueError("n must be non-negative")

    def task(start, stop):
        return pairwise_reduce((f(i) for i in range(start, stop)), combine, identity)

    partials = _run([lambda s=s, e=e: task(s, e) for s, e in chunk_bounds(n, cfg.chunk)], cfg)
    return pairwise_reduce(partials, combine, identity)


def pairwise_sum(x, axis=-1):
    """Sum along ``axis`` with a fixed balanced tree, independent of BLAS/SIMD paths."""
    a = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    if a.shape[-1] == 0:
        return np.zeros(a.shape[:-1])
    while a.shape[-1] > 1:
        m = a.shape[-1]
        even = a[..., : m - (m % 2)]
        s = even[..., 0::2] + even[..., 1::2]
        if m % 2:
            s = np.concatenate([s, a[..., -1:]], axis=-1)
        a = s
    return a[..., 0]
