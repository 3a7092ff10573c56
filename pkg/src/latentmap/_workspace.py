"""Reusable scratch buffers for the training hot path.

Large per-step temporaries (batch x width arrays) cost more in allocation
page faults than in arithmetic. Exclusive owners of a training loop pass a
plain dict; callers that need concurrent reads pass None and get fresh
allocations.
"""

from __future__ import annotations

import numpy as np


def scratch(ws: dict | None, key, shape, dtype=np.float64) -> np.ndarray:
    """Fetch (or create) an uninitialized buffer of the requested shape."""
    shape = tuple(shape)
    arr = None if ws is None else ws.get(key)
    if arr is None or arr.shape != shape or arr.dtype != dtype:
        arr = np.empty(shape, dtype)
        if ws is not None:
            ws[key] = arr
    return arr
