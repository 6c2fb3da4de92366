"""Dense float64 tensors with hand-written reverse-mode gradients.

Only the handful of ops the encoder-decoder model family uses are provided.
Activations are kept 2-D (``[rows, features]``); ops that need a batch/time
structure (attention, sequence concatenation) take the batch size explicitly.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the backward graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    node.grad = None    # free intermediate buffers


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # leaves get a private buffer; some backward fns add into leaf grads in place
        t.grad = g if t._parents else np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, g)
    return _node(a.data + b.data, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias {b.shape} does not match last dim of {x.shape}")

    def backward(g):
        _accum(x, g)
        _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
    return _node(x.data + b.data, (x, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        _accum(x, g * c)
    return _node(x.data * c, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        _accum(x, np.where(out > 0.0, g, 0.0))
    return _node(out, (x,), backward)


def total(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, np.full(x.shape, float(g)))
    return _node(np.array(x.data.sum()), (x,), backward)


def mean_squared_error(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred.data - target
    n = diff.size

    def backward(g):
        _accum(pred, (2.0 * float(g) / n) * diff)
    return _node(np.array(np.mean(diff * diff)), (pred,), backward)


# -------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T``) for 2-D operands."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    bd = b.data.T if transpose_b else b.data
    if a.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {bd.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ bd.T)
        if b.requires_grad:
            gb = a.data.T @ g
            _accum(b, gb.T if transpose_b else gb)
    return _node(a.data @ bd, (a, b), backward)


def prefix(x: Tensor, extents: Sequence[int]) -> Tensor:
    """Front slice ``x[:e0, :e1, ...]``; gradients land only inside the slice."""
    if len(extents) != x.data.ndim or any(e > s for e, s in zip(extents, x.shape)):
        raise DimensionError(f"slice {tuple(extents)} does not fit {x.shape}")
    idx = tuple(slice(0, e) for e in extents)
    if tuple(extents) == x.shape:
        return x
    data = np.ascontiguousarray(x.data[idx])

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[idx] += g
    return _node(data, (x,), backward)


def concat_seq(parts: Sequence[Tensor], batch: int) -> Tensor:
    """Concatenate ``[batch*T_i, d]`` blocks along the time axis of each sequence."""
    d = parts[0].shape[1]
    lens = [p.shape[0] // batch for p in parts]
    data = np.concatenate([p.data.reshape(batch, t, d) for p, t in zip(parts, lens)], axis=1)

    def backward(g):
        g3 = g.reshape(batch, -1, d)
        start = 0
        for p, t in zip(parts, lens):
            _accum(p, np.ascontiguousarray(g3[:, start:start + t]).reshape(-1, d))
            start += t
    return _node(data.reshape(-1, d), tuple(parts), backward)


def repeat_seq(x: Tensor, batch: int, times: int) -> Tensor:
    """Concatenate ``times`` copies of ``x`` along time (used by tests/oracles)."""
    return concat_seq([x] * times, batch)


# ------------------------------------------------------------ normalisation

def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return _node(p, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
    return _node(xhat * gain.data + bias.data, (x, gain, bias), backward)


# ------------------------------------------------------------------ lookups

def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)
    return _node(table.data[ids], (table,), backward)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = 0,
                  label_smoothing: float = 0.0) -> Tensor:
    """Mean token cross-entropy over positions whose target is not ``ignore_index``."""
    targets = np.asarray(targets).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise DimensionError("targets do not align with logits rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    valid = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    count = max(int(valid.sum()), 1)
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    gold = logp[rows, targets]
    per_pos = -(1.0 - label_smoothing) * gold
    if label_smoothing:
        per_pos = per_pos - label_smoothing * logp.mean(axis=-1)
    loss = float((per_pos * valid).sum() / count)

    def backward(g):
        p = np.exp(logp)
        q = np.full_like(p, label_smoothing / v)
        q[rows, targets] += 1.0 - label_smoothing
        _accum(logits, (float(g) / count) * (p - q) * valid[:, None])
    return _node(np.array(loss), (logits,), backward)


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean over valid rows of ``-sum_c q_c log softmax(logits)_c``."""
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    count = max(int(valid.sum()), 1)
    logp = _log_softmax(logits.data)
    loss = float((-(target_probs * logp).sum(axis=-1) * valid).sum() / count)

    def backward(g):
        p = np.exp(logp)
        rowsum = target_probs.sum(axis=-1, keepdims=True)
        _accum(logits, (float(g) / count) * (p * rowsum - target_probs) * valid[:, None])
    return _node(np.array(loss), (logits,), backward)


# ---------------------------------------------------------------- attention

def attention_mask(batch: int, tq: int, tk: int, key_valid: np.ndarray | None = None,
                   causal: bool = False, q_offset: int = 0) -> np.ndarray | None:
    """Boolean ``[batch, 1, tq, tk]`` mask of allowed query/key pairs, or None."""
    if key_valid is None and not causal:
        return None
    mask = np.ones((batch, 1, tq, tk), dtype=bool)
    if key_valid is not None:
        mask &= np.asarray(key_valid, dtype=bool).reshape(batch, 1, 1, tk)
    if causal:
        mask &= (np.arange(tk)[None, :] <= np.arange(tq)[:, None] + q_offset)[None, None]
    return mask


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, batch: int,
              mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on projected q/k/v.

    ``q`` is ``[batch*tq, width]``, ``k``/``v`` are ``[batch*tk, width]``; the
    width is split into ``heads`` equal parts.  Returns the concatenated head
    contexts ``[batch*tq, width]`` (output projection is applied by the caller).
    """
    width = q.shape[1]
    if width % heads or k.shape[1] != width or v.shape != k.shape:
        raise DimensionError(f"attention width {width} / heads {heads} / k {k.shape} / v {v.shape}")
    dh = width // heads
    tq, tk = q.shape[0] // batch, k.shape[0] // batch
    scale_ = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(batch, tq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.data.reshape(batch, tk, heads, dh).transpose(0, 2, 1, 3)
    vh = v.data.reshape(batch, tk, heads, dh).transpose(0, 2, 1, 3)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale_
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = p @ vh
    out = ctx.transpose(0, 2, 1, 3).reshape(batch * tq, width)

    def backward(g):
        gh = g.reshape(batch, tq, heads, dh).transpose(0, 2, 1, 3)
        if v.requires_grad:
            gv = p.transpose(0, 1, 3, 2) @ gh
            _accum(v, gv.transpose(0, 2, 1, 3).reshape(batch * tk, width))
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale_
        if q.requires_grad:
            _accum(q, (gs @ kh).transpose(0, 2, 1, 3).reshape(batch * tq, width))
        if k.requires_grad:
            _accum(k, (gs.transpose(0, 1, 3, 2) @ qh).transpose(0, 2, 1, 3).reshape(batch * tk, width))
    return _node(out, (q, k, v), backward)


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, name: str, shape: tuple[int, ...]) -> None:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
            self.t[name] = np.zeros(shape, dtype=np.int64)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              regions: dict[str, tuple[int, ...]] | None = None) -> None:
    """In-place bias-corrected Adam update.

    Step counters are kept per entry.  When ``regions`` is given, only the front
    slice ``param[:e0, :e1, ...]`` of each listed parameter is updated and only
    those entries' moments and counters advance.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad {g.shape} vs param {p.shape} for {name}")
        state.ensure(name, p.shape)
        if regions is not None:
            idx = tuple(slice(0, e) for e in regions[name])
        else:
            idx = tuple(slice(None) for _ in p.shape)
        gr = g[idx]
        m, v, t = state.m[name][idx], state.v[name][idx], state.t[name][idx]
        t += 1
        m *= beta1
        m += (1.0 - beta1) * gr
        v *= beta2
        v += (1.0 - beta2) * gr * gr
        if np.all(t == t.flat[0]):
            step = int(t.flat[0])
            mhat = m / (1.0 - beta1 ** step)
            vhat = v / (1.0 - beta2 ** step)
        else:
            mhat = m / (1.0 - beta1 ** t)
            vhat = v / (1.0 - beta2 ** t)
        p[idx] -= lr * mhat / (np.sqrt(vhat) + eps)


def gradcheck(fn: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5,
              entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the scalar output from the current ``inputs`` data.
    ``entries`` limits the check to that many random entries per input.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idxs = range(flat.size)
        if entries is not None and entries < flat.size:
            idxs = (rng or np.random.default_rng(0)).choice(flat.size, size=entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = fn().item()
            flat[i] = orig - h
            with no_grad():
                fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = ga.reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1e-8)
            worst = max(worst, abs(num - ana) / denom)
    return worst
