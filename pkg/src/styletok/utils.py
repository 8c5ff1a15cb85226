"""Small shared helpers."""

from __future__ import annotations

import os


def worker_count() -> int:
    """Worker parallelism cap: GST_THREADS env var, default machine cores."""
    cores = os.cpu_count() or 1
    raw = os.environ.get("GST_THREADS", "")
    if not raw:
        return cores
    try:
        n = int(raw)
    except ValueError:
        return cores
    return max(1, min(n, cores))
