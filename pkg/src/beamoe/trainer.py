"""Character-level MoE language model, deterministic training loop, corpus
ingestion, and versioned checkpoints.

The model exists to feed the MoE blocks realistic token streams: embedding,
causal multi-head attention, one MoE block per layer (pre-norm, residual),
and a vocabulary projection. Everything is seeded and single-threaded, so a
run reproduces bit for bit.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import RouteResult, RoutingStrategy, build_block, block_forward
from .beam import sparsity_loss
from .moe import MoEBlockConfig, balance_loss_from
from .tensor import (
    NEG_SENTINEL,
    ContractError,
    NumericError,
    Tape,
    Tensor,
    add,
    cross_entropy,
    mask_fill,
    matmul,
    mul,
    reshape,
    rms_norm,
    softmax,
    take_rows,
    transpose,
)


@dataclass
class ModelConfig:
    vocab_size: int
    d_h: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_length: int = 64
    d_ff: int = 128
    num_experts: int = 8
    top_k: int = 4
    num_shared: int = 0
    has_norm: bool = True
    activation: str = "silu"
    strategy: RoutingStrategy = field(
        default_factory=lambda: RoutingStrategy("vanilla_topk")
    )
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.strategy, dict):
            self.strategy = RoutingStrategy(**self.strategy)
        if self.d_h % self.n_heads != 0:
            raise ContractError("d_h must be divisible by n_heads")
        if self.context_length < 2:
            raise ContractError("context_length must be >= 2")
        self.block_config()  # validates the MoE fields

    def block_config(self) -> MoEBlockConfig:
        return MoEBlockConfig(
            d_h=self.d_h,
            d_ff=self.d_ff,
            num_experts=self.num_experts,
            top_k=self.top_k,
            num_shared=self.num_shared,
            has_norm=self.has_norm,
            activation=self.activation,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = {"kind": self.strategy.kind, "params": dict(self.strategy.params)}
        return d


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    warmup_ratio: float = 0.03
    alpha: float = 1e-3  # load-balance coefficient
    beta: float = 0.0  # sparsity coefficient
    batch_size: int = 8
    steps: int = 200
    grad_clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ContractError("warmup_ratio must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ContractError("batch_size must be >= 1 and steps >= 0")

    def lr_at(self, step: int) -> float:
        """Linear warmup to the peak rate, then linear decay to zero."""
        warmup = int(self.warmup_ratio * self.steps)
        if step < warmup:
            return self.learning_rate * (step + 1) / warmup
        remaining = max(1, self.steps - warmup)
        return self.learning_rate * (1.0 - (step - warmup) / remaining)


TRACE_HEADER = "step,lm_loss,bal_loss,reg_loss,total_loss,expert_active_rate,learning_rate"


@dataclass
class TraceRow:
    step: int
    lm_loss: float
    bal_loss: float
    reg_loss: float
    total_loss: float
    expert_active_rate: float
    learning_rate: float

    def to_csv(self) -> str:
        return (
            f"{self.step},{self.lm_loss!r},{self.bal_loss!r},{self.reg_loss!r},"
            f"{self.total_loss!r},{self.expert_active_rate!r},{self.learning_rate!r}"
        )


def write_trace(rows: list[TraceRow], path) -> None:
    with open(path, "w") as f:
        f.write(TRACE_HEADER + "\n")
        for r in rows:
            f.write(r.to_csv() + "\n")


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; the model has been rolled back
    to the last state that produced a finite loss."""

    def __init__(self, step: int, rows: list[TraceRow]):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.rows = rows


class TinyMoELM:
    """Two-ish layer causal transformer whose feed-forward is an MoE block."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        std = 0.02
        d = cfg.d_h

        def p(shape):
            return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

        self.wte = p((cfg.vocab_size, d))
        self.wpe = p((cfg.context_length, d))
        self.layers = []
        for _ in range(cfg.n_layers):
            layer = {
                "attn_norm": Tensor(np.ones(d), requires_grad=True),
                "wq": p((d, d)),
                "wk": p((d, d)),
                "wv": p((d, d)),
                "wo": p((d, d)),
                "block": build_block(cfg.block_config(), cfg.strategy, rng),
            }
            self.layers.append(layer)
        self.final_norm = Tensor(np.ones(d), requires_grad=True)
        self.lm_head = p((d, cfg.vocab_size))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("wte", self.wte), ("wpe", self.wpe)]
        for i, layer in enumerate(self.layers):
            pre = f"layers.{i}."
            out += [
                (pre + "attn_norm", layer["attn_norm"]),
                (pre + "wq", layer["wq"]),
                (pre + "wk", layer["wk"]),
                (pre + "wv", layer["wv"]),
                (pre + "wo", layer["wo"]),
            ]
            out += layer["block"].named_tensors(pre + "block.")
        out += [("final_norm", self.final_norm), ("lm_head", self.lm_head)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def _attention(self, layer: dict, x: Tensor) -> Tensor:
        cfg = self.cfg
        b, t, d = x.shape
        hd = d // cfg.n_heads
        xn = rms_norm(x, layer["attn_norm"])
        q = matmul(xn, layer["wq"])
        k = matmul(xn, layer["wk"])
        v = matmul(xn, layer["wv"])

        def heads(z):
            return transpose(reshape(z, (b, t, cfg.n_heads, hd)), (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        causal = np.tril(np.ones((t, t), dtype=bool))
        weights = softmax(
            mask_fill(scores, causal, NEG_SENTINEL), masked_value=NEG_SENTINEL
        )
        out = transpose(matmul(weights, v), (0, 2, 1, 3))
        return matmul(reshape(out, (b, t, d)), layer["wo"])

    def forward(
        self,
        ids: np.ndarray,
        training: bool,
        step: int = 0,
        total_steps: int = 1,
        binarize_soft: bool = False,
    ) -> tuple[Tensor, list[RouteResult]]:
        """Logits (B, T, V) and per-layer routing results."""
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, t = ids.shape
        if t > cfg.context_length:
            raise ContractError("sequence longer than context_length")
        x = add(take_rows(self.wte, ids), take_rows(self.wpe, np.arange(t)))
        routes = []
        for layer in self.layers:
            x = add(x, self._attention(layer, x))
            flat = reshape(x, (b * t, cfg.d_h))
            out, rr = block_forward(
                flat,
                layer["block"],
                cfg.strategy,
                training,
                step=step,
                total_steps=total_steps,
                binarize_soft=binarize_soft,
            )
            routes.append(rr)
            x = reshape(out, (b, t, cfg.d_h))
        x = rms_norm(x, self.final_norm)
        return matmul(x, self.lm_head), routes

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            t.data[...] = snap[name]


def total_loss(lm: Tensor, bal: Tensor, reg: Tensor, alpha: float, beta: float) -> Tensor:
    """L = L_lm + alpha * L_bal + beta * L_reg."""
    for name, t in (("lm", lm), ("bal", bal), ("reg", reg)):
        if not np.isfinite(t.data):
            raise NumericError(f"{name} loss is not finite")
    return add(lm, add(mul(bal, alpha), mul(reg, beta)))


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class Adam:
    """Adaptive-moment optimizer, standard defaults, no weight decay."""

    def __init__(self, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g if p.grad is not None else 0.0)
            p.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _mean_tensors(values: list[Tensor]) -> Tensor:
    acc = values[0]
    for v in values[1:]:
        acc = add(acc, v)
    return mul(acc, 1.0 / len(values))


def sample_batch(
    ids: np.ndarray, context: int, batch_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    starts = rng.integers(0, len(ids) - context, size=batch_size)
    x = np.stack([ids[s : s + context] for s in starts])
    y = np.stack([ids[s + 1 : s + context + 1] for s in starts])
    return x, y


def train(
    model_cfg: ModelConfig, train_cfg: TrainConfig, corpus_ids: np.ndarray
) -> tuple[TinyMoELM, list[TraceRow]]:
    """Deterministic training run; returns the model and the per-step trace.

    Raises TrainingDiverged (model rolled back to the last finite-loss
    state) if any loss component goes non-finite.
    """
    if len(corpus_ids) < model_cfg.context_length + 1:
        raise ContractError("corpus shorter than context_length + 1")
    model = TinyMoELM(model_cfg)
    params = model.parameters()
    opt = Adam(params)
    rng = np.random.default_rng(train_cfg.seed)
    rows: list[TraceRow] = []
    good: dict[str, np.ndarray] | None = None

    for step in range(train_cfg.steps):
        lr = train_cfg.lr_at(step)
        xb, yb = sample_batch(
            corpus_ids, model_cfg.context_length, train_cfg.batch_size, rng
        )
        with Tape() as tape:
            logits, routes = model.forward(
                xb, training=True, step=step, total_steps=train_cfg.steps
            )
            b, t, v = logits.shape
            lm = cross_entropy(reshape(logits, (b * t, v)), yb.reshape(-1))
            bal = _mean_tensors(
                [balance_loss_from(rr.logits, rr.balance_active) for rr in routes]
            )
            if routes[0].raw_mask is not None:
                reg = _mean_tensors(
                    [sparsity_loss(rr.raw_mask, rr.reg_indices) for rr in routes]
                )
            else:
                reg = Tensor._raw(np.asarray(0.0))
            try:
                loss = total_loss(lm, bal, reg, train_cfg.alpha, train_cfg.beta)
            except NumericError:
                if good is not None:
                    model.restore(good)
                raise TrainingDiverged(step, rows)
            tape.backward(loss)

        good = model.snapshot()
        clip_gradients(params, train_cfg.grad_clip_norm)
        opt.step(lr)
        for p in params:
            p.zero_grad()

        active_rate = float(
            np.mean([rr.active_bits.mean() for rr in routes], dtype=np.float64)
        )
        rows.append(
            TraceRow(
                step=step,
                lm_loss=float(lm.data),
                bal_loss=float(bal.data),
                reg_loss=float(reg.data),
                total_loss=float(loss.data),
                expert_active_rate=active_rate,
                learning_rate=lr,
            )
        )
    return model, rows


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


def synthetic_text(length: int, seed: int) -> str:
    """Seeded mixture of predictable structure and noise.

    Arithmetic facts and repeated n-grams are highly predictable once
    learned; the random-letter runs are not. The mix gives per-token
    difficulty variation, which is what makes learned masking interesting.
    """
    if length < 1:
        raise ContractError("synthetic corpus length must be positive")
    rng = np.random.default_rng(seed)
    words = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran", "to", "sun"]
    parts: list[str] = []
    total = 0
    while total < length:
        kind = int(rng.integers(0, 4))
        if kind == 0:
            a, b = int(rng.integers(0, 50)), int(rng.integers(0, 50))
            s = f"{a}+{b}={a + b};"
        elif kind == 1:
            pat = "".join(chr(97 + int(c)) for c in rng.integers(0, 26, rng.integers(2, 5)))
            s = pat * int(rng.integers(3, 8)) + " "
        elif kind == 2:
            s = " ".join(words[int(i)] for i in rng.integers(0, len(words), rng.integers(3, 7)))
            s += ". "
        else:
            s = "".join(chr(97 + int(c)) for c in rng.integers(0, 26, rng.integers(3, 10)))
            s += " "
        parts.append(s)
        total += len(s)
    return "".join(parts)[:length]


def ingest_text(text: str) -> tuple[np.ndarray, list[str]]:
    """Character-level ids plus the sorted-unique-character vocabulary."""
    if not text:
        raise ContractError("empty corpus")
    vocab = sorted(set(text))
    lookup = {ch: i for i, ch in enumerate(vocab)}
    ids = np.fromiter((lookup[ch] for ch in text), dtype=np.int64, count=len(text))
    return ids, vocab


def ingest_corpus(source: dict) -> tuple[np.ndarray, list[str]]:
    """source: {"kind": "synthetic", "length", "seed"} or {"kind": "file", "path"}."""
    kind = source.get("kind")
    if kind == "synthetic":
        text = synthetic_text(int(source["length"]), int(source.get("seed", 0)))
    elif kind == "file":
        with open(source["path"], "rb") as f:
            text = f.read().decode("utf-8")
    else:
        raise ContractError(f"unknown corpus kind {kind!r}")
    return ingest_text(text)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"BMOECKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: TinyMoELM, path) -> None:
    """Magic + version + canonical config + named float64 blobs + crc32."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    cfg_bytes = json.dumps(model.cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    blob += struct.pack("<Q", len(cfg_bytes))
    blob += cfg_bytes
    named = model.named_parameters()
    blob += struct.pack("<Q", len(named))
    for name, tensor in named:
        nb = name.encode()
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", tensor.data.ndim)
        for s in tensor.data.shape:
            blob += struct.pack("<Q", s)
        blob += tensor.data.astype("<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path, strategy: RoutingStrategy | None = None) -> TinyMoELM:
    """Rebuild a model from a checkpoint.

    ``strategy`` overrides the stored routing strategy; attaching a
    mask-router strategy to a checkpoint that has no mask weights leaves
    those weights at their zero initialization, which reproduces the
    checkpoint's behavior exactly until further training.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError("checksum mismatch: corrupt or truncated checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    cfg_dict = json.loads(blob[off : off + cfg_len].decode())
    off += cfg_len
    if strategy is not None:
        cfg_dict["strategy"] = {"kind": strategy.kind, "params": dict(strategy.params)}
    cfg = ModelConfig(**cfg_dict)
    model = TinyMoELM(cfg)
    lookup = dict(model.named_parameters())

    (n_params,) = struct.unpack_from("<Q", blob, off)
    off += 8
    seen = set()
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        if name not in lookup:
            raise CheckpointError(f"checkpoint parameter {name!r} not in model")
        if lookup[name].data.shape != tuple(shape):
            raise CheckpointError(f"shape mismatch for {name!r}")
        lookup[name].data[...] = data
        seen.add(name)
    for name in lookup:
        if name not in seen and not name.endswith("mask_w"):
            raise CheckpointError(f"model parameter {name!r} missing from checkpoint")
    return model


# ---------------------------------------------------------------------------
# evaluation and sampling
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    perplexity: float
    avg_k: float  # mechanism-level mean activated experts per (token, layer)
    token_count: int


def _record_routes(trace, routes, ids, seq_base, phase, pairs=None):
    """Record routing cells. ``pairs`` maps window positions to trace
    positions (defaults to identity over the whole window)."""
    b, t = ids.shape
    k = routes[0].candidate_ids.shape[-1]
    if pairs is None:
        pairs = [(p, p) for p in range(t)]
    for layer_idx, rr in enumerate(routes):
        cand = rr.candidate_ids.reshape(b, t, k)
        bits = rr.active_bits.reshape(b, t, k)
        for bi in range(b):
            for window_pos, trace_pos in pairs:
                trace.record_cell(
                    sequence_id=seq_base + bi,
                    position=trace_pos,
                    layer=layer_idx,
                    expert_ids=cand[bi, window_pos],
                    mask_bits=bits[bi, window_pos],
                    phase=phase,
                    token_id=int(ids[bi, window_pos]),
                )


def evaluate(
    model: TinyMoELM,
    corpus_ids: np.ndarray,
    max_windows: int | None = None,
    batch_size: int = 8,
    trace=None,
    binarize_soft: bool = False,
    trace_sampling: float = 1.0,
    trace_seed: int = 0,
) -> EvalResult:
    """Held-out perplexity over non-overlapping windows, inference path.

    Masked experts are skipped through the dispatch plan; routing decisions
    are optionally recorded into ``trace`` (phase "prefill").
    """
    cfg = model.cfg
    t = cfg.context_length
    n_windows = (len(corpus_ids) - 1) // t
    if max_windows is not None:
        n_windows = min(n_windows, max_windows)
    if n_windows < 1:
        raise ContractError("corpus too small to evaluate")
    if not 0.0 < trace_sampling <= 1.0:
        raise ContractError("trace_sampling must lie in (0, 1]")
    sample_rng = np.random.default_rng(trace_seed)

    total_nll = 0.0
    total_tokens = 0
    active_sum = 0.0
    active_cells = 0
    from .tensor import cross_entropy as ce

    for start in range(0, n_windows, batch_size):
        count = min(batch_size, n_windows - start)
        xs = np.stack([corpus_ids[i * t : i * t + t] for i in range(start, start + count)])
        ys = np.stack(
            [corpus_ids[i * t + 1 : i * t + t + 1] for i in range(start, start + count)]
        )
        logits, routes = model.forward(xs, training=False, binarize_soft=binarize_soft)
        b, tt, v = logits.shape
        nll = float(ce(reshape(logits, (b * tt, v)), ys.reshape(-1)).data)
        total_nll += nll * b * tt
        total_tokens += b * tt
        for rr in routes:
            active_sum += float(rr.active_counts.sum())
            active_cells += rr.active_counts.size
        if trace is not None:
            if trace_sampling >= 1.0:
                pairs = None
            else:
                keep = sample_rng.random(tt) < trace_sampling
                pairs = [(p, p) for p in range(tt) if keep[p]]
            _record_routes(trace, routes, xs, start, "prefill", pairs)

    return EvalResult(
        perplexity=float(np.exp(total_nll / total_tokens)),
        avg_k=active_sum / active_cells,
        token_count=total_tokens,
    )


def sample_greedy(
    model: TinyMoELM,
    prompt_ids: np.ndarray,
    max_new_tokens: int,
    trace=None,
    binarize_soft: bool = False,
    sequence_id: int = 0,
) -> np.ndarray:
    """Greedy decoding; prompt cells are traced as prefill, generated cells
    as decode."""
    cfg = model.cfg
    ids = list(np.asarray(prompt_ids, dtype=np.int64)[-cfg.context_length :])
    window = np.asarray(ids, dtype=np.int64)[None, :]
    logits, routes = model.forward(window, training=False, binarize_soft=binarize_soft)
    if trace is not None:
        _record_routes(trace, routes, window, sequence_id, "prefill")
    generated: list[int] = []
    abs_pos = len(ids)  # trace position keeps counting past the window
    for _ in range(max_new_tokens):
        nxt = int(np.argmax(logits.data[0, -1]))
        generated.append(nxt)
        ids.append(nxt)
        ids = ids[-cfg.context_length :]
        window = np.asarray(ids, dtype=np.int64)[None, :]
        logits, routes = model.forward(window, training=False, binarize_soft=binarize_soft)
        if trace is not None:
            _record_routes(
                trace,
                routes,
                window,
                sequence_id,
                "decode",
                pairs=[(len(ids) - 1, abs_pos)],
            )
        abs_pos += 1
    return np.asarray(generated, dtype=np.int64)
