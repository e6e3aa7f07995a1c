"""Core mixture-of-experts layer: gated-linear-unit experts, top-k routing,
load-balancing loss, and the residual block with optional shared experts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    NEG_SENTINEL,
    ContractError,
    ShapeError,
    Tensor,
    add,
    gather_rc,
    mask_fill,
    matmul,
    mul,
    reshape,
    rms_norm,
    scatter_rows,
    sigmoid_np,
    silu,
    softmax,
    take_rows,
    tsum,
)


def _identity(x):
    return x


ACTIVATIONS = {"silu": silu, "identity": _identity}


def _silu_np(x: np.ndarray) -> np.ndarray:
    return x * sigmoid_np(x)


ACTIVATIONS_NP = {"silu": _silu_np, "identity": lambda x: x}


@dataclass
class MoEBlockConfig:
    d_h: int
    d_ff: int
    num_experts: int
    top_k: int
    num_shared: int = 0
    has_norm: bool = True
    activation: str = "silu"

    def __post_init__(self):
        if self.d_h < 1 or self.d_ff < 1:
            raise ContractError("d_h and d_ff must be positive")
        if self.num_experts < 1:
            raise ContractError("need at least one expert")
        if not 1 <= self.top_k <= self.num_experts:
            raise ContractError("top_k must satisfy 1 <= K <= N")
        if self.num_shared < 0:
            raise ContractError("num_shared must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


@dataclass
class Expert:
    """One gated-linear-unit feed-forward expert."""

    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    @classmethod
    def init_random(
        cls, d_h: int, d_ff: int, rng: np.random.Generator, std: float = 0.02
    ) -> "Expert":
        return cls(
            w_gate=Tensor(rng.normal(0.0, std, (d_h, d_ff)), requires_grad=True),
            w_up=Tensor(rng.normal(0.0, std, (d_h, d_ff)), requires_grad=True),
            w_down=Tensor(rng.normal(0.0, std, (d_ff, d_h)), requires_grad=True),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w_gate, self.w_up, self.w_down]


def expert_forward(x: Tensor, expert: Expert, activation: str = "silu") -> Tensor:
    """(act(x @ W_gate) * (x @ W_up)) @ W_down."""
    act = ACTIVATIONS[activation]
    return matmul(mul(act(matmul(x, expert.w_gate)), matmul(x, expert.w_up)), expert.w_down)


def expert_forward_np(x: np.ndarray, expert: Expert, activation: str = "silu") -> np.ndarray:
    # Inference fast path; mirrors expert_forward op for op so results are
    # bit-identical to the taped version.
    act = ACTIVATIONS_NP[activation]
    return (act(x @ expert.w_gate.data) * (x @ expert.w_up.data)) @ expert.w_down.data


@dataclass
class RouterDecision:
    """Primary-router output for one batch of tokens.

    ``weights`` holds the full (T, N) weight matrix: softmax over the kept
    logits on each token's top-k set, exactly zero elsewhere.
    """

    logits: Tensor
    topk_indices: np.ndarray
    weights: Tensor


def topk_select(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties won by the lower index."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    return np.ascontiguousarray(order[..., :k])


def topk_route(x: Tensor, router_weights: Tensor, k: int) -> RouterDecision:
    """Route tokens to their k highest-logit experts.

    Non-selected logits are replaced by the most-negative finite sentinel
    before the softmax, which maps them to exactly zero weight.
    """
    n = router_weights.shape[-1]
    if not 1 <= k <= n:
        raise ContractError("top_k must satisfy 1 <= K <= N")
    logits = matmul(x, router_weights)
    idx = topk_select(logits.data, k)
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, idx, True, axis=-1)
    masked = mask_fill(logits, keep, NEG_SENTINEL)
    weights = softmax(masked, masked_value=NEG_SENTINEL)
    return RouterDecision(logits=logits, topk_indices=idx, weights=weights)


def balance_loss_from(logits: Tensor, active: np.ndarray) -> Tensor:
    """Switch-style auxiliary loss N * sum_i f_i * P_i.

    f_i is the fraction of tokens whose active set contains expert i (a
    constant: no gradient), P_i the token-mean of the full softmax over the
    raw logits, so the gradient reaches only the primary router.
    """
    t, n = logits.shape
    if t < 1:
        raise ContractError("need at least one token")
    f = active.astype(np.float64).mean(axis=0)
    p = mul(tsum(softmax(logits), axis=0), 1.0 / t)
    return mul(tsum(mul(p, Tensor._raw(f))), float(n))


def load_balance_loss(decision: RouterDecision) -> Tensor:
    active = np.zeros(decision.weights.shape, dtype=bool)
    np.put_along_axis(active, decision.topk_indices, True, axis=-1)
    return balance_loss_from(decision.logits, active)


class MoEBlock:
    """Parameter container for one MoE layer.

    The router matrix has ``num_experts + extra_router_cols`` columns; the
    extra columns exist only for null-expert routing. ``mask_router`` is
    attached by the strategies that need one and stays None otherwise.
    """

    def __init__(
        self,
        cfg: MoEBlockConfig,
        rng: np.random.Generator,
        extra_router_cols: int = 0,
        init_std: float = 0.02,
    ):
        self.cfg = cfg
        self.router_w = Tensor(
            rng.normal(0.0, init_std, (cfg.d_h, cfg.num_experts + extra_router_cols)),
            requires_grad=True,
        )
        self.experts = [
            Expert.init_random(cfg.d_h, cfg.d_ff, rng, init_std)
            for _ in range(cfg.num_experts)
        ]
        self.shared = [
            Expert.init_random(cfg.d_h, cfg.d_ff, rng, init_std)
            for _ in range(cfg.num_shared)
        ]
        self.norm_w = (
            Tensor(np.ones(cfg.d_h), requires_grad=True) if cfg.has_norm else None
        )
        self.mask_router = None

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}router_w", self.router_w)]
        for i, e in enumerate(self.experts):
            out += [
                (f"{prefix}experts.{i}.w_gate", e.w_gate),
                (f"{prefix}experts.{i}.w_up", e.w_up),
                (f"{prefix}experts.{i}.w_down", e.w_down),
            ]
        for i, e in enumerate(self.shared):
            out += [
                (f"{prefix}shared.{i}.w_gate", e.w_gate),
                (f"{prefix}shared.{i}.w_up", e.w_up),
                (f"{prefix}shared.{i}.w_down", e.w_down),
            ]
        if self.norm_w is not None:
            out.append((f"{prefix}norm_w", self.norm_w))
        if self.mask_router is not None:
            out.append((f"{prefix}mask_w", self.mask_router.weight))
        return out

    def normalize(self, h: Tensor) -> Tensor:
        return rms_norm(h, self.norm_w) if self.norm_w is not None else h

    def normalize_np(self, h: np.ndarray) -> np.ndarray:
        from .tensor import rms_norm_np

        return rms_norm_np(h, self.norm_w.data) if self.norm_w is not None else h


def moe_block_forward(
    h: Tensor,
    weights_hat: Tensor,
    experts: list[Expert],
    shared_experts: list[Expert] = (),
    *,
    norm_weight: Tensor | None = None,
    x_norm: Tensor | None = None,
    activation: str = "silu",
    compute_ids: np.ndarray | None = None,
    shared_weight: float = 1.0,
) -> Tensor:
    """Residual MoE update h' = h + sum_i ghat_i E_i(N(h)) + shared terms.

    ``weights_hat`` may contain zeros; with all-zero weights and no shared
    experts the input is returned unchanged. ``compute_ids`` (T, C) forces
    expert evaluation for those token/expert pairs even where the weight is
    zero, which training needs so the weight gradients exist. Per-token
    accumulation runs in ascending expert order in every execution path, so
    alternative dispatch routes can be compared at tight tolerances.
    """
    if np.any(weights_hat.data < 0):
        raise ContractError("expert weights must be non-negative")
    t = h.shape[0]
    n = len(experts)
    if weights_hat.shape != (t, n):
        raise ShapeError("weights_hat must be (tokens, num_experts)")

    if x_norm is None:
        x_norm = rms_norm(h, norm_weight) if norm_weight is not None else h

    if compute_ids is not None:
        rows_per_expert = [
            np.nonzero((compute_ids == i).any(axis=-1))[0] for i in range(n)
        ]
    else:
        rows_per_expert = [np.nonzero(weights_hat.data[:, i] != 0.0)[0] for i in range(n)]

    y: Tensor | None = None
    for i in range(n):
        rows = rows_per_expert[i]
        if rows.size == 0:
            continue
        xi = take_rows(x_norm, rows)
        oi = expert_forward(xi, experts[i], activation)
        wi = reshape(gather_rc(weights_hat, rows, np.full(rows.shape, i)), (rows.size, 1))
        contrib = scatter_rows(mul(oi, wi), rows, t)
        y = contrib if y is None else add(y, contrib)
    for e in shared_experts:
        so = expert_forward(x_norm, e, activation)
        if shared_weight != 1.0:
            so = mul(so, shared_weight)
        y = so if y is None else add(y, so)

    if y is None:
        return h
    return add(h, y)
