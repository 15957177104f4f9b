"""Average-rank computation shared by scores, metrics and preference code."""

from __future__ import annotations

import numpy as np


def average_ranks(values) -> np.ndarray:
    """Ranks 1..n where tied values share the mean rank of their block.

    Uses a stable sort, so the result is deterministic for any input order.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D array, got shape {v.shape}")
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.shape[0], dtype=np.float64)
    sorted_v = v[order]
    i = 0
    n = v.shape[0]
    while i < n:
        j = i
        while j < n and sorted_v[j] == sorted_v[i]:
            j += 1
        # block occupies ranks i+1 .. j, mean is (i+1 + j) / 2
        ranks[order[i:j]] = (i + 1 + j) / 2.0
        i = j
    return ranks
