"""Masked expert dispatch: route ids through the binary mask, group tokens
by expert in block-aligned runs, and execute only the surviving slots.

The two hot kernels (id masking and expert-wise grouping) exist twice: a
compiled Cython extension and a pure-numpy fallback with identical
semantics. The compiled backend is preferred when the extension built;
``BEAMOE_DISPATCH_BACKEND=python|cython`` overrides the choice.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from ..moe import Expert, expert_forward_np, topk_select
from ..tensor import ContractError

from . import _fallback

try:
    from . import _kernels
except ImportError:
    _kernels = None

_BACKENDS = {"python": _fallback}
if _kernels is not None:
    _BACKENDS["cython"] = _kernels


def _select_backend():
    choice = os.environ.get("BEAMOE_DISPATCH_BACKEND", "auto")
    if choice == "auto":
        return _BACKENDS.get("cython", _fallback)
    if choice not in _BACKENDS:
        raise ContractError(
            f"dispatch backend {choice!r} unavailable; have {sorted(_BACKENDS)}"
        )
    return _BACKENDS[choice]


_backend = _select_backend()


def active_backend() -> str:
    return _backend.BACKEND_NAME


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def mask_route(
    topk_ids: np.ndarray, mask_pre_activations: np.ndarray, backend: str | None = None
) -> np.ndarray:
    """Masked expert ids: entry (t, k) keeps its routed id when the token's
    mask pre-activation for that expert is >= 0 (i.e. raw mask >= 0.5), and
    becomes -1 otherwise. Invalid ids also map to -1."""
    impl = _BACKENDS[backend] if backend else _backend
    return impl.mask_route(topk_ids, np.ascontiguousarray(mask_pre_activations, dtype=np.float64))


@dataclass
class DispatchPlan:
    """Expert-grouped, block-aligned slot layout.

    Per expert: ``tokens[e]``/``slots[e]`` hold the real (token, k-slot)
    pairs in ascending scan order, then -1 padding up to a multiple of
    ``block_size``. Padding is bookkeeping parity with the device layout the
    plan mirrors; padded slots carry no work.
    """

    block_size: int
    num_experts: int
    tokens: list[np.ndarray]
    slots: list[np.ndarray]
    real_counts: np.ndarray

    @property
    def total_real(self) -> int:
        return int(self.real_counts.sum())

    def padded_count(self, expert: int) -> int:
        return len(self.tokens[expert])


def align_block(
    ids: np.ndarray,
    block_size: int,
    num_experts: int | None = None,
    backend: str | None = None,
) -> DispatchPlan:
    """Group unmasked slots by expert and pad each group to a block multiple.

    All -1 entries are ignored. Within an expert, slots keep ascending
    (token, k-slot) order so downstream accumulation order is deterministic.
    """
    if block_size < 1:
        raise ContractError("block_size must be >= 1")
    ids = np.asarray(ids, dtype=np.int64)
    if num_experts is None:
        num_experts = int(ids.max()) + 1 if ids.size and ids.max() >= 0 else 0
    impl = _BACKENDS[backend] if backend else _backend
    counts, token_order, slot_order = impl.group_by_expert(ids, num_experts)
    tokens: list[np.ndarray] = []
    slots: list[np.ndarray] = []
    offset = 0
    for e in range(num_experts):
        c = int(counts[e])
        padded = ((c + block_size - 1) // block_size) * block_size
        tok = np.full(padded, -1, dtype=np.int64)
        slo = np.full(padded, -1, dtype=np.int64)
        tok[:c] = token_order[offset : offset + c]
        slo[:c] = slot_order[offset : offset + c]
        tokens.append(tok)
        slots.append(slo)
        offset += c
    return DispatchPlan(
        block_size=block_size,
        num_experts=num_experts,
        tokens=tokens,
        slots=slots,
        real_counts=counts,
    )


def grouped_execute(
    h: np.ndarray,
    plan: DispatchPlan,
    experts: list[Expert],
    weights_hat: np.ndarray,
    activation: str = "silu",
) -> np.ndarray:
    """Run each expert once over its real slots and scatter weighted outputs.

    Output equals the naive per-token loop: tokens absent from the plan get
    zero contribution, and per-token accumulation follows ascending expert
    id. The weights' nonzero pattern must agree with the plan.
    """
    t = h.shape[0]
    if int(np.count_nonzero(weights_hat)) != plan.total_real:
        raise ContractError("weights_hat nonzero count disagrees with plan slots")
    y = np.zeros_like(h)
    for e in range(plan.num_experts):
        c = int(plan.real_counts[e])
        if c == 0:
            continue
        rows = plan.tokens[e][:c]
        w = weights_hat[rows, e]
        if np.any(w == 0.0):
            raise ContractError(f"plan routes a zero-weight slot to expert {e}")
        out = expert_forward_np(h[rows], experts[e], activation)
        # rows are unique within one expert, so fancy-index += is safe
        y[rows] += out * w[:, None]
    return y


def naive_execute(
    h: np.ndarray,
    masked_ids: np.ndarray,
    experts: list[Expert],
    weights_hat: np.ndarray,
    activation: str = "silu",
) -> np.ndarray:
    """Per-token reference loop used as the dispatch oracle."""
    t, k = masked_ids.shape
    y = np.zeros_like(h)
    for tok in range(t):
        for e in sorted(int(i) for i in masked_ids[tok] if i >= 0):
            out = expert_forward_np(h[tok : tok + 1], experts[e], activation)
            y[tok] += weights_hat[tok, e] * out[0]
    return y


@dataclass
class BenchRow:
    active_fraction: float
    slots_executed: int
    wall_time_ns_min: int
    wall_time_ns_mean: float
    backend: str


BENCH_CSV_HEADER = "active_fraction,slots_executed,wall_time_ns_min,wall_time_ns_mean"


def bench_dispatch(
    num_tokens: int,
    num_experts: int,
    top_k: int,
    d_h: int,
    d_ff: int,
    active_fractions: list[float],
    repetitions: int,
    block_size: int = 16,
    seed: int = 0,
    backend: str | None = None,
) -> list[BenchRow]:
    """Time grouped_execute at synthetic activity levels.

    Mask synthesis is deterministic given the seed: exactly
    round(fraction * T * K) slots survive, so executed-slot counts land on
    the target within rounding. Plans are built outside the timed region;
    the minimum over repetitions is the noise-robust statistic.
    """
    for f in active_fractions:
        if not 0.0 < f <= 1.0:
            raise ContractError("active fractions must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    h = rng.normal(0.0, 1.0, (num_tokens, d_h))
    experts = [Expert.init_random(d_h, d_ff, rng) for _ in range(num_experts)]
    base_ids = topk_select(rng.normal(0.0, 1.0, (num_tokens, num_experts)), top_k)
    base_weights = rng.uniform(0.1, 1.0, (num_tokens, top_k))
    backend_name = backend or active_backend()

    rows = []
    for fraction in active_fractions:
        keep_count = int(round(fraction * num_tokens * top_k))
        keep_flat = np.zeros(num_tokens * top_k, dtype=bool)
        keep_flat[rng.permutation(num_tokens * top_k)[:keep_count]] = True
        keep = keep_flat.reshape(num_tokens, top_k)
        masked_ids = np.where(keep, base_ids, np.int64(-1))
        weights_hat = np.zeros((num_tokens, num_experts))
        rows_idx = np.repeat(np.arange(num_tokens), top_k)[keep_flat]
        cols_idx = base_ids.reshape(-1)[keep_flat]
        weights_hat[rows_idx, cols_idx] = base_weights.reshape(-1)[keep_flat]
        plan = align_block(masked_ids, block_size, num_experts, backend=backend_name)

        timings = []
        for _ in range(repetitions):
            t0 = time.perf_counter_ns()
            grouped_execute(h, plan, experts, weights_hat)
            timings.append(time.perf_counter_ns() - t0)
        rows.append(
            BenchRow(
                active_fraction=fraction,
                slots_executed=plan.total_real,
                wall_time_ns_min=min(timings),
                wall_time_ns_mean=float(np.mean(timings)),
                backend=backend_name,
            )
        )
    return rows
