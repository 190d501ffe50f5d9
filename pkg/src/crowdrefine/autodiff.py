"""Minimal reverse-mode automatic differentiation over dense 2-D float64 arrays.

A Tape records one backward closure per operation; calling backward walks the
records in exact reverse order. Everything is float64 and deterministic:
identical inputs produce bit-identical forward and backward results.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np
from scipy.special import expit


class Tensor2:
    """A 2-D float64 value with an optional accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"Tensor2 must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def out_grad(self) -> np.ndarray:
        """Gradient flowing out of this node; zeros if nothing reached it."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad


class Param:
    """A named trainable tensor; its gradient persists until an optimizer step."""

    def __init__(self, name: str, data):
        self.name = name
        self.value = Tensor2(data)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value.out_grad()

    def zero_grad(self) -> None:
        self.value.grad = None


class Tape:
    """Ordered record of operations; backward replays them last-to-first."""

    def __init__(self):
        self._records: list[Callable[[], None]] = []

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._records.append(backward_fn)

    def backward(self, loss: Tensor2) -> None:
        if loss.data.shape != (1, 1):
            raise ValueError(f"backward expects a 1x1 loss, got {loss.data.shape}")
        if not np.isfinite(loss.data[0, 0]):
            raise FloatingPointError("loss is not finite")
        loss.accumulate(np.ones((1, 1)))
        for fn in reversed(self._records):
            fn()


def _t(x) -> Tensor2:
    """Coerce Param / array-like operands to Tensor2."""
    if isinstance(x, Param):
        return x.value
    if isinstance(x, Tensor2):
        return x
    return Tensor2(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def linear(tape: Tape, x, w, b=None) -> Tensor2:
    """x @ W + bias, bias broadcast over rows."""
    xt, wt = _t(x), _t(w)
    if xt.cols != wt.rows:
        raise ValueError(f"linear shape mismatch: {xt.data.shape} @ {wt.data.shape}")
    y = xt.data @ wt.data
    bt = None
    if b is not None:
        bt = _t(b)
        if bt.data.shape != (1, wt.cols):
            raise ValueError(f"bias must be (1, {wt.cols}), got {bt.data.shape}")
        y = y + bt.data
    out = Tensor2(y)

    def backward():
        g = out.out_grad()
        xt.accumulate(g @ wt.data.T)
        wt.accumulate(xt.data.T @ g)
        if bt is not None:
            bt.accumulate(g.sum(axis=0, keepdims=True))

    tape.record(backward)
    return out


def matmul(tape: Tape, a, b) -> Tensor2:
    at, bt = _t(a), _t(b)
    out = Tensor2(at.data @ bt.data)

    def backward():
        g = out.out_grad()
        at.accumulate(g @ bt.data.T)
        bt.accumulate(at.data.T @ g)

    tape.record(backward)
    return out


def matmul_nt(tape: Tape, a, b) -> Tensor2:
    """a @ b.T (used for attention logits)."""
    at, bt = _t(a), _t(b)
    out = Tensor2(at.data @ bt.data.T)

    def backward():
        g = out.out_grad()
        at.accumulate(g @ bt.data)
        bt.accumulate(g.T @ at.data)

    tape.record(backward)
    return out


def add(tape: Tape, a, b) -> Tensor2:
    at, bt = _t(a), _t(b)
    if at.data.shape != bt.data.shape:
        raise ValueError(f"add shape mismatch: {at.data.shape} vs {bt.data.shape}")
    out = Tensor2(at.data + bt.data)

    def backward():
        g = out.out_grad()
        at.accumulate(g)
        bt.accumulate(g)

    tape.record(backward)
    return out


def sub(tape: Tape, a, b) -> Tensor2:
    at, bt = _t(a), _t(b)
    if at.data.shape != bt.data.shape:
        raise ValueError(f"sub shape mismatch: {at.data.shape} vs {bt.data.shape}")
    out = Tensor2(at.data - bt.data)

    def backward():
        g = out.out_grad()
        at.accumulate(g)
        bt.accumulate(-g)

    tape.record(backward)
    return out


def mul(tape: Tape, a, b) -> Tensor2:
    """Elementwise product."""
    at, bt = _t(a), _t(b)
    if at.data.shape != bt.data.shape:
        raise ValueError(f"mul shape mismatch: {at.data.shape} vs {bt.data.shape}")
    out = Tensor2(at.data * bt.data)

    def backward():
        g = out.out_grad()
        at.accumulate(g * bt.data)
        bt.accumulate(g * at.data)

    tape.record(backward)
    return out


def affine(tape: Tape, x, scale: float = 1.0, shift: float = 0.0) -> Tensor2:
    """scale * x + shift with constant scalars."""
    xt = _t(x)
    out = Tensor2(scale * xt.data + shift)

    def backward():
        xt.accumulate(scale * out.out_grad())

    tape.record(backward)
    return out


def relu(tape: Tape, x) -> Tensor2:
    xt = _t(x)
    out = Tensor2(np.maximum(xt.data, 0.0))

    def backward():
        xt.accumulate(out.out_grad() * (xt.data > 0.0))

    tape.record(backward)
    return out


def sigmoid(tape: Tape, x) -> Tensor2:
    xt = _t(x)
    s = expit(xt.data)
    out = Tensor2(s)

    def backward():
        xt.accumulate(out.out_grad() * s * (1.0 - s))

    tape.record(backward)
    return out


def log(tape: Tape, x) -> Tensor2:
    xt = _t(x)
    if np.any(xt.data <= 0.0):
        raise ValueError("log requires strictly positive inputs")
    out = Tensor2(np.log(xt.data))

    def backward():
        xt.accumulate(out.out_grad() / xt.data)

    tape.record(backward)
    return out


def pow_const(tape: Tape, x, exponent: float) -> Tensor2:
    """x ** exponent with exponent >= 0 (subgradient 0 at x=0 when exponent < 1)."""
    if exponent < 0:
        raise ValueError("pow_const requires a non-negative exponent")
    xt = _t(x)
    out = Tensor2(np.power(xt.data, exponent))

    def backward():
        if exponent == 0:
            return
        d = exponent * np.power(xt.data, exponent - 1.0)
        d = np.where(np.isfinite(d), d, 0.0)
        xt.accumulate(out.out_grad() * d)

    tape.record(backward)
    return out


def softmax_rows(tape: Tape, x, mask: np.ndarray | None = None) -> Tensor2:
    """Row-wise softmax; optional boolean mask restricts support per row.

    Masked-out entries receive probability exactly 0 (their logits are
    replaced by -inf before normalization). A row with no allowed entry
    is an error.
    """
    xt = _t(x)
    logits = xt.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape:
            raise ValueError(f"mask shape {mask.shape} != logits shape {logits.shape}")
        if logits.shape[0] and not mask.any(axis=1).all():
            raise ValueError("softmax mask has a row with no allowed entries")
        logits = np.where(mask, logits, -np.inf)
    if logits.shape[0] == 0:
        out = Tensor2(logits.copy())
        tape.record(lambda: None)
        return out
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor2(s)

    def backward():
        g = out.out_grad()
        inner = (g * s).sum(axis=1, keepdims=True)
        xt.accumulate(s * (g - inner))

    tape.record(backward)
    return out


def maxpool_rows(tape: Tape, x) -> Tensor2:
    """Column-wise maximum as a 1-row tensor; empty input pools to zeros.

    Backward routes each column's gradient to the first row attaining the
    maximum, which keeps tied inputs deterministic.
    """
    xt = _t(x)
    m, d = xt.data.shape
    if m == 0:
        out = Tensor2(np.zeros((1, d)))
        tape.record(lambda: None)
        return out
    idx = np.argmax(xt.data, axis=0)
    out = Tensor2(xt.data[idx, np.arange(d)][None, :])

    def backward():
        g = out.out_grad()
        acc = np.zeros_like(xt.data)
        np.add.at(acc, (idx, np.arange(d)), g[0])
        xt.accumulate(acc)

    tape.record(backward)
    return out


def sum_all(tape: Tape, x) -> Tensor2:
    xt = _t(x)
    out = Tensor2(np.array([[xt.data.sum()]]))

    def backward():
        xt.accumulate(np.full_like(xt.data, out.out_grad()[0, 0]))

    tape.record(backward)
    return out


def mean_all(tape: Tape, x) -> Tensor2:
    xt = _t(x)
    n = max(xt.data.size, 1)
    out = Tensor2(np.array([[xt.data.sum() / n]]))

    def backward():
        xt.accumulate(np.full_like(xt.data, out.out_grad()[0, 0] / n))

    tape.record(backward)
    return out


def gather_rows(tape: Tape, x, indices) -> Tensor2:
    """Select rows by index (duplicates allowed); backward scatter-adds."""
    xt = _t(x)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= xt.rows):
        raise IndexError(f"row indices out of range for {xt.rows} rows")
    out = Tensor2(xt.data[idx])

    def backward():
        acc = np.zeros_like(xt.data)
        np.add.at(acc, idx, out.out_grad())
        xt.accumulate(acc)

    tape.record(backward)
    return out


def slice_cols(tape: Tape, x, start: int, stop: int) -> Tensor2:
    xt = _t(x)
    out = Tensor2(xt.data[:, start:stop].copy())

    def backward():
        acc = np.zeros_like(xt.data)
        acc[:, start:stop] = out.out_grad()
        xt.accumulate(acc)

    tape.record(backward)
    return out


def concat_rows(tape: Tape, parts: Sequence) -> Tensor2:
    ts = [_t(p) for p in parts]
    if not ts:
        raise ValueError("concat_rows needs at least one part")
    cols = ts[0].cols
    if any(t.cols != cols for t in ts):
        raise ValueError("concat_rows parts must share the column count")
    out = Tensor2(np.vstack([t.data for t in ts]))
    offsets = np.cumsum([0] + [t.rows for t in ts])

    def backward():
        g = out.out_grad()
        for t, a, b in zip(ts, offsets[:-1], offsets[1:]):
            t.accumulate(g[a:b])

    tape.record(backward)
    return out


def concat_cols(tape: Tape, parts: Sequence) -> Tensor2:
    ts = [_t(p) for p in parts]
    if not ts:
        raise ValueError("concat_cols needs at least one part")
    rows = ts[0].rows
    if any(t.rows != rows for t in ts):
        raise ValueError("concat_cols parts must share the row count")
    out = Tensor2(np.hstack([t.data for t in ts]))
    offsets = np.cumsum([0] + [t.cols for t in ts])

    def backward():
        g = out.out_grad()
        for t, a, b in zip(ts, offsets[:-1], offsets[1:]):
            t.accumulate(g[:, a:b])

    tape.record(backward)
    return out


def detach(x) -> Tensor2:
    """Copy the value and block all gradient flow through it."""
    xt = _t(x)
    return Tensor2(xt.data.copy())


def focal_bce(tape: Tape, logits, targets, alpha: float = 0.25,
              gamma: float = 2.0, eps: float = 1e-12) -> Tensor2:
    """Elementwise focal binary cross-entropy on logits.

    loss = -alpha * y * (1-p)^gamma * log(p)
           - (1-alpha) * (1-y) * p^gamma * log(1-p)
    with p = sigmoid(logits). gamma=0, alpha=0.5 gives half the plain BCE.
    """
    lt = _t(logits)
    y = np.asarray(targets, dtype=np.float64).reshape(lt.data.shape)
    p = sigmoid(tape, lt)
    one_minus_p = affine(tape, p, -1.0, 1.0)
    log_p = log(tape, affine(tape, p, 1.0, eps))
    log_1mp = log(tape, affine(tape, one_minus_p, 1.0, eps))
    pos = mul(tape, pow_const(tape, one_minus_p, gamma), log_p)
    neg = mul(tape, pow_const(tape, p, gamma), log_1mp)
    weighted = add(tape, mul(tape, Tensor2(alpha * y), pos),
                   mul(tape, Tensor2((1.0 - alpha) * (1.0 - y)), neg))
    return affine(tape, weighted, -1.0, 0.0)


class AttentionParams:
    """Projection weights of one multi-head attention block."""

    def __init__(self, d: int, rng: np.random.Generator, prefix: str = "attn"):
        std = (2.0 / (d + d)) ** 0.5
        self.wq = Param(f"{prefix}.wq", rng.normal(0.0, std, (d, d)))
        self.wk = Param(f"{prefix}.wk", rng.normal(0.0, std, (d, d)))
        self.wv = Param(f"{prefix}.wv", rng.normal(0.0, std, (d, d)))
        self.wo = Param(f"{prefix}.wo", rng.normal(0.0, std, (d, d)))
        self.bq = Param(f"{prefix}.bq", np.zeros((1, d)))
        self.bk = Param(f"{prefix}.bk", np.zeros((1, d)))
        self.bv = Param(f"{prefix}.bv", np.zeros((1, d)))
        self.bo = Param(f"{prefix}.bo", np.zeros((1, d)))

    def all(self) -> list[Param]:
        return [self.wq, self.bq, self.wk, self.bk,
                self.wv, self.bv, self.wo, self.bo]


def masked_attention(tape: Tape, q_in, k_in, v_in, mask: np.ndarray | None,
                     params: AttentionParams, heads: int,
                     collect_info: list | None = None) -> Tensor2:
    """Multi-head scaled dot-product attention with an optional boolean mask.

    mask[i, j] = True lets query row i attend to key row j; False entries get
    a -inf logit, i.e. exactly zero attention. Every query row needs at least
    one allowed key. With mask=None this is ordinary global attention.
    `collect_info`, when given, receives per-head (weights, values) arrays
    for diagnostics.
    """
    qt, kt, vt = _t(q_in), _t(k_in), _t(v_in)
    d = qt.cols
    if d % heads != 0:
        raise ValueError(f"feature dim {d} not divisible by {heads} heads")
    dh = d // heads
    q = linear(tape, qt, params.wq, params.bq)
    k = linear(tape, kt, params.wk, params.bk)
    v = linear(tape, vt, params.wv, params.bv)
    ctx_parts = []
    for hd in range(heads):
        qs = slice_cols(tape, q, hd * dh, (hd + 1) * dh)
        ks = slice_cols(tape, k, hd * dh, (hd + 1) * dh)
        vs = slice_cols(tape, v, hd * dh, (hd + 1) * dh)
        logits = affine(tape, matmul_nt(tape, qs, ks), 1.0 / np.sqrt(dh))
        attn = softmax_rows(tape, logits, mask)
        if collect_info is not None:
            collect_info.append((attn.data.copy(), vs.data.copy()))
        ctx_parts.append(matmul(tape, attn, vs))
    ctx = concat_cols(tape, ctx_parts)
    return linear(tape, ctx, params.wo, params.bo)


def zero_grads(params: Sequence[Param]) -> None:
    for p in params:
        p.zero_grad()


def sgd_step(params: Sequence[Param], lr: float) -> None:
    """value -= lr * grad for every param, then zero all grads."""
    for p in params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
        p.value.data -= lr * g
        p.zero_grad()


def grad_check(build: Callable[[Tape], Tensor2], params: Sequence[Param],
               h: float = 1e-5, max_entries_per_param: int = 16,
               seed: int = 0, floor: float = 1e-3) -> float:
    """Max relative error of reverse-mode grads vs central finite differences.

    `build` must construct the scalar loss afresh from the current parameter
    values (deterministically) on the tape it is given. Large parameters are
    probed at a seeded random subset of entries. `floor` bounds the
    denominator so the ~1e-10 finite-difference noise on exactly-zero
    gradients does not register as a large relative error.
    """
    zero_grads(params)
    tape = Tape()
    loss = build(tape)
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    zero_grads(params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.value.data.reshape(-1)
        n = flat.size
        if n <= max_entries_per_param:
            entries = np.arange(n)
        else:
            entries = rng.choice(n, size=max_entries_per_param, replace=False)
        an_flat = analytic[p.name].reshape(-1)
        for k in entries:
            orig = flat[k]
            flat[k] = orig + h
            f_plus = build(Tape()).data[0, 0]
            flat[k] = orig - h
            f_minus = build(Tape()).data[0, 0]
            flat[k] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            if not np.isfinite(fd):
                raise FloatingPointError("non-finite finite-difference probe")
            denom = max(abs(fd), abs(an_flat[k]), floor)
            worst = max(worst, abs(fd - an_flat[k]) / denom)
    return worst
