"""Dense float64 arrays with tape-based reverse-mode differentiation.

Just enough machinery for a small mixture-of-experts stack: matmul, masked
softmax, sigmoid/silu, gather/scatter, rms-norm, cross-entropy, plus a
straight-through binarizer. Forward values live in numpy; every op records a
backward rule on the active tape. With no tape active the same functions run
forward-only, which is how inference reuses the exact training arithmetic.

Gradients are additive: ``Tape.backward`` accumulates into ``Tensor.grad``
and never clears it, so running backward twice doubles the gradient. Callers
reset grads between steps.
"""

from __future__ import annotations

import numpy as np

# Stand-in for -inf in masked logits: most-negative finite float64, so exp()
# underflows to 0.0 instead of producing NaNs, and masked softmax can detect
# masked entries by exact comparison.
NEG_SENTINEL = np.finfo(np.float64).min


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """A value that must be finite is NaN or infinite."""


class ContractError(ValueError):
    """An input violates a documented precondition."""


class Tensor:
    """A float64 array plus an additive gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @classmethod
    def _raw(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Internal fast path: trusted array, no copy, no finiteness check.
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, contribution: np.ndarray, owned: bool = False) -> None:
        if self.grad is None:
            self.grad = contribution if owned else contribution.copy()
        else:
            self.grad += contribution

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of operations for one reverse sweep.

    Nodes are appended in execution order, which is a topological order by
    construction; ``backward`` walks them once in reverse. Per-call gradient
    flow is kept in a scratch map so repeated backward calls over the same
    tape add (rather than corrupt) persisted gradients.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ShapeError("backward root must be a scalar")
        if not np.isfinite(root.data):
            raise NumericError("backward root is not finite")
        flow: dict[int, tuple[Tensor, np.ndarray]] = {
            id(root): (root, np.ones_like(root.data))
        }
        for out, rule in reversed(self.nodes):
            entry = flow.pop(id(out), None)
            if entry is None:
                continue
            g = entry[1]
            # flow buffers are owned here; rules only read them
            out.accumulate_grad(g, owned=True)
            rule(g, flow)
        for tensor, g in flow.values():
            tensor.accumulate_grad(g, owned=True)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(out: Tensor, rule) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append((out, rule))


def _send(flow: dict, t: Tensor, contribution: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    entry = flow.get(key)
    if entry is None:
        flow[key] = (t, contribution.copy())
    else:
        entry[1].__iadd__(contribution)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._raw(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._raw(a.data + b.data, a.requires_grad or b.requires_grad)

    def rule(g, flow):
        _send(flow, a, _unbroadcast(g, a.data.shape))
        _send(flow, b, _unbroadcast(g, b.data.shape))

    _record(out, rule)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._raw(a.data - b.data, a.requires_grad or b.requires_grad)

    def rule(g, flow):
        _send(flow, a, _unbroadcast(g, a.data.shape))
        _send(flow, b, _unbroadcast(-g, b.data.shape))

    _record(out, rule)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._raw(a.data * b.data, a.requires_grad or b.requires_grad)
    a_data, b_data = a.data, b.data

    def rule(g, flow):
        _send(flow, a, _unbroadcast(g * b_data, a_data.shape))
        _send(flow, b, _unbroadcast(g * a_data, b_data.shape))

    _record(out, rule)
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._raw(a.data / b.data, a.requires_grad or b.requires_grad)
    a_data, b_data = a.data, b.data

    def rule(g, flow):
        _send(flow, a, _unbroadcast(g / b_data, a_data.shape))
        _send(flow, b, _unbroadcast(-g * a_data / (b_data * b_data), b_data.shape))

    _record(out, rule)
    return out


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; N-d operands contract over the last two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor._raw(np.matmul(a.data, b.data), a.requires_grad or b.requires_grad)
    a_data, b_data = a.data, b.data

    def rule(g, flow):
        ga = np.matmul(g, b_data.swapaxes(-1, -2))
        gb = np.matmul(a_data.swapaxes(-1, -2), g)
        _send(flow, a, _unbroadcast(ga, a_data.shape))
        _send(flow, b, _unbroadcast(gb, b_data.shape))

    _record(out, rule)
    return out


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._raw(x.data.sum(axis=axis, keepdims=keepdims), x.requires_grad)
    shape = x.data.shape

    def rule(g, flow):
        if axis is None:
            _send(flow, x, np.broadcast_to(g, shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _send(flow, x, np.broadcast_to(gg, shape).copy())

    _record(out, rule)
    return out


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._raw(x.data.reshape(shape), x.requires_grad)
    old = x.data.shape

    def rule(g, flow):
        _send(flow, x, g.reshape(old))

    _record(out, rule)
    return out


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._raw(x.data.transpose(axes), x.requires_grad)
    inverse = tuple(np.argsort(axes))

    def rule(g, flow):
        _send(flow, x, g.transpose(inverse))

    _record(out, rule)
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """View of columns [start, stop) along the last axis."""
    x = _as_tensor(x)
    out = Tensor._raw(x.data[..., start:stop], x.requires_grad)
    shape = x.data.shape

    def rule(g, flow):
        gx = np.zeros(shape)
        gx[..., start:stop] = g
        _send(flow, x, gx)

    _record(out, rule)
    return out


# ---------------------------------------------------------------------------
# gather / scatter
# ---------------------------------------------------------------------------


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: out[i...] = x[idx[i...]]. Also serves as embedding lookup."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError("row index out of range")
    out = Tensor._raw(x.data[idx], x.requires_grad)
    shape = x.data.shape

    def rule(g, flow):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        _send(flow, x, gx)

    _record(out, rule)
    return out


def scatter_rows(values: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Inverse of take_rows for unique indices: out[idx[i]] += values[i]."""
    values = _as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.zeros((num_rows,) + values.data.shape[1:])
    np.add.at(out_data, idx, values.data)
    out = Tensor._raw(out_data, values.requires_grad)

    def rule(g, flow):
        _send(flow, values, g[idx])

    _record(out, rule)
    return out


def gather_rc(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Elementwise pick out[i] = x[rows[i], cols[i]] from a 2-d tensor."""
    x = _as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = Tensor._raw(x.data[rows, cols], x.requires_grad)
    shape = x.data.shape

    def rule(g, flow):
        gx = np.zeros(shape)
        np.add.at(gx, (rows, cols), g)
        _send(flow, x, gx)

    _record(out, rule)
    return out


def mask_fill(x: Tensor, keep: np.ndarray, fill_value: float) -> Tensor:
    """Replace entries where ``keep`` is False by a constant."""
    x = _as_tensor(x)
    keep = np.asarray(keep, dtype=bool)
    out = Tensor._raw(np.where(keep, x.data, fill_value), x.requires_grad)

    def rule(g, flow):
        _send(flow, x, np.where(keep, g, 0.0))

    _record(out, rule)
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Overflow-free in both tails: z = exp(-|x|) <= 1, and
    # sigmoid(-|x|) = z / (1 + z) = 1 - 1 / (1 + z).
    z = np.exp(-np.abs(x))
    t = 1.0 / (1.0 + z)
    return np.where(x >= 0, t, 1.0 - t)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = sigmoid_np(x.data)
    out = Tensor._raw(y, x.requires_grad)

    def rule(g, flow):
        _send(flow, x, g * y * (1.0 - y))

    _record(out, rule)
    return out


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = _as_tensor(x)
    s = sigmoid_np(x.data)
    out = Tensor._raw(x.data * s, x.requires_grad)
    x_data = x.data

    def rule(g, flow):
        _send(flow, x, g * s * (1.0 + x_data * (1.0 - s)))

    _record(out, rule)
    return out


def softmax_np(x: np.ndarray, masked_value: float | None = None) -> np.ndarray:
    if masked_value is None:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    masked = x == masked_value
    if masked.all(axis=-1).any():
        raise ContractError("softmax row with every entry masked")
    finite_max = np.where(masked, -np.inf, x).max(axis=-1, keepdims=True)
    e = np.exp(x - finite_max)
    e[masked] = 0.0  # exact zero by comparison, not by exp underflow
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor, masked_value: float | None = None) -> Tensor:
    """Softmax over the last axis; entries equal to ``masked_value`` map to
    exactly 0 probability and receive zero gradient."""
    x = _as_tensor(x)
    y = softmax_np(x.data, masked_value)
    out = Tensor._raw(y, x.requires_grad)

    def rule(g, flow):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _send(flow, x, y * (g - dot))

    _record(out, rule)
    return out


def binarize_ste(x: Tensor, threshold: float) -> Tensor:
    """Hard threshold (inclusive) in the forward pass; identity in backward.

    The non-differentiable step is the one place the tape lies on purpose:
    the straight-through rule passes the incoming gradient unchanged.
    """
    x = _as_tensor(x)
    out = Tensor._raw((x.data >= threshold).astype(np.float64), x.requires_grad)

    def rule(g, flow):
        _send(flow, x, g)

    _record(out, rule)
    return out


def rms_norm_np(x: np.ndarray, weight: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    ms = (x * x).mean(axis=-1, keepdims=True) + eps
    return x * (ms**-0.5) * weight


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis with learnable scale."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    d = x.data.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + eps
    inv = ms**-0.5
    normed = x.data * inv
    out = Tensor._raw(normed * weight.data, x.requires_grad or weight.requires_grad)
    x_data, w_data = x.data, weight.data

    def rule(g, flow):
        gw_axes = tuple(range(g.ndim - 1))
        _send(flow, weight, (g * normed).sum(axis=gw_axes))
        gw = g * w_data
        dot = (gw * x_data).sum(axis=-1, keepdims=True)
        _send(flow, x, inv * gw - (inv**3 / d) * x_data * dot)

    _record(out, rule)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of integer targets.

    logits: (T, V); targets: (T,) ints in [0, V).
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects 2-d logits")
    t, v = logits.data.shape
    if targets.shape != (t,):
        raise ShapeError("targets must have one entry per logits row")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("target id out of vocabulary range")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(t), targets].mean()
    out = Tensor._raw(np.asarray(loss), logits.requires_grad)

    def rule(g, flow):
        grad = np.exp(logp)
        grad[np.arange(t), targets] -= 1.0
        _send(flow, logits, grad * (g / t))

    _record(out, rule)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def check_gradient(
    f,
    params: list[Tensor],
    epsilon: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_coords: int | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments, reads the current contents of ``params``, and
    returns a scalar Tensor. Coordinates are exhaustive unless ``max_coords``
    caps the per-parameter sample (drawn from ``rng``).
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
        if out.data.size != 1:
            raise ShapeError("check_gradient needs a scalar-valued function")
        if not np.isfinite(out.data):
            raise NumericError("function value is not finite")
        tape.backward(out)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    for p, ana in zip(params, analytic):
        n = p.data.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            hi = f().item()
            flat[c] = orig - epsilon
            lo = f().item()
            flat[c] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("function value is not finite under perturbation")
            fd = (hi - lo) / (2.0 * epsilon)
            err = abs(ana.reshape(-1)[c] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, err)
    return worst
