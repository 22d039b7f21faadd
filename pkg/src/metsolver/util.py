"""Shared helpers: keyed RNG streams, worker fan-out, stable hashing."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator derived from (seed, key...).

    The same (seed, key) always yields the same stream, no matter how work
    is split across workers.
    """
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


def worker_count(requested: int | None = None) -> int:
    """Fan-out width: min(requested, MET_THREADS, available parallelism)."""
    avail = os.cpu_count() or 1
    cap = os.environ.get("MET_THREADS")
    if cap is not None:
        avail = min(avail, max(int(cap), 1))
    if requested is not None:
        avail = min(avail, max(int(requested), 1))
    return avail


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Map fn over items, fanning out to threads; results merged by index."""
    n = worker_count(workers)
    items = list(items)
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def config_hash(obj) -> str:
    """Stable sha256 of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def rates_key(rates, granularity: float = 1e-9) -> str:
    """Canonical key for a rate combination: log-rates quantized at 1e-9."""
    parts = []
    for sym in sorted(rates):
        q = round(np.log(float(rates[sym])) / granularity)
        parts.append(f"{sym}:{q}")
    return ",".join(parts)


def init_key(x0) -> str:
    return ",".join(str(int(v)) for v in np.asarray(x0).reshape(-1))
