"""Pure-numpy implementations of the dispatch hot kernels.

Semantics must match the compiled backend exactly; the test suite asserts
bit-identical outputs between the two.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def mask_route(topk_ids: np.ndarray, mask_logits: np.ndarray) -> np.ndarray:
    """Replace each routed expert id by -1 when its mask logit is negative.

    Out-of-range ids (including incoming -1) also map to -1, mirroring the
    defensive guard of the device kernel this reimplements.
    """
    ids = np.asarray(topk_ids, dtype=np.int64)
    t = ids.shape[0]
    n = mask_logits.shape[1]
    valid = (ids >= 0) & (ids < n)
    safe = np.where(valid, ids, 0)
    kept = mask_logits[np.arange(t)[:, None], safe] >= 0.0
    return np.where(valid & kept, ids, np.int64(-1))


def group_by_expert(ids: np.ndarray, num_experts: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Group unmasked (token, slot) pairs by expert id.

    Returns (counts, token_order, slot_order): per-expert real-slot counts
    plus the token and slot indices concatenated expert by expert, each
    expert's run in ascending (token, slot) order.
    """
    ids = np.asarray(ids, dtype=np.int64)
    t, k = ids.shape
    flat = ids.reshape(-1)
    real = np.nonzero(flat >= 0)[0]  # ascending flat index == (token, slot) order
    experts = flat[real]
    counts = np.bincount(experts, minlength=num_experts).astype(np.int64)
    order = np.argsort(experts, kind="stable")
    picked = real[order]
    return counts, picked // k, picked % k
