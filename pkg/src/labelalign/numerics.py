"""Dense float64 tensors with reverse-mode differentiation.

The operator set is exactly what the text encoder and the loss stack need:
matmul, broadcast add/mul, LayerNorm, GELU, multi-head attention, L2
normalization, cosine similarity, (log-)softmax with temperature,
logsumexp, log, square, clamp, sum/mean, and the row select/stack ops used
to assemble prompt sequences from embedding tables.

Forward ops run eagerly on numpy arrays. When a Tape is active, every op
records a backward closure; Tape.backward replays the closures in exact
reverse recording order and accumulates gradients into every
requires_grad leaf. Without an active tape the same ops run as pure
forward computation (used for frozen teacher passes and the
finite-difference oracle).

All values are float64; reductions delegate to numpy, which is
deterministic for identical inputs, so identical inputs and evaluation
order produce bitwise-identical outputs.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DomainError, NumericError, UsageError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DenseTensor:
    """N-dimensional float64 array with an optional gradient slot.

    Values are treated as immutable once used in a forward pass; the
    optimizer mutates leaf ``data`` only between graphs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_rec")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._rec: "Tape | None" = None  # tape this tensor was produced on

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"DenseTensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> DenseTensor:
    return DenseTensor(data, requires_grad=requires_grad)


def constant(data) -> DenseTensor:
    return DenseTensor(data, requires_grad=False)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Wengert list: ordered record of primitive applications.

    Each entry holds the output tensor, its parent tensors, and a closure
    mapping the output gradient to per-parent gradients (None for parents
    that need no gradient). Backward walks entries in exact reverse
    recording order, which is a valid topological order because inputs
    always exist before outputs in eager recording. Tapes are not shared
    across threads.
    """

    def __init__(self):
        self._entries: list[tuple[DenseTensor, tuple[DenseTensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def record(self, out: DenseTensor, parents: tuple[DenseTensor, ...], backward_fn: Callable) -> None:
        self._entries.append((out, parents, backward_fn))
        out._rec = self

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, output: DenseTensor) -> None:
        """Populate .grad on every requires_grad leaf reachable from output.

        Repeated calls accumulate unless grads are zeroed in between.
        """
        if output.data.size != 1:
            raise UsageError(
                f"backward requires a scalar output, got shape {output.data.shape}"
            )
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        if output._rec is None and output.requires_grad:
            output.accumulate_grad(grads[id(output)])
        for out, parents, backward_fn in reversed(self._entries):
            gout = grads.pop(id(out), None)
            if gout is None:
                continue
            need = tuple(_needs_grad(p, self) for p in parents)
            pgrads = backward_fn(gout, need)
            for parent, pg, needed in zip(parents, pgrads, need):
                if not needed or pg is None:
                    continue
                if parent._rec is self:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                elif parent.requires_grad:
                    parent.accumulate_grad(pg)


def _needs_grad(t: DenseTensor, tape: Tape) -> bool:
    return t.requires_grad or t._rec is tape


def backward(output: DenseTensor, tape: Tape) -> None:
    """Module-level alias for Tape.backward."""
    tape.backward(output)


def _record(out: DenseTensor, parents: tuple[DenseTensor, ...], backward_fn: Callable) -> DenseTensor:
    t = active_tape()
    if t is not None and any(_needs_grad(p, t) for p in parents):
        t.record(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the axes numpy broadcasting introduced for an operand of `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# Elementwise and arithmetic primitives
# --------------------------------------------------------------------------

def add(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    out = DenseTensor(a.data + b.data)

    def bwd(g, need):
        return (
            _unbroadcast(g, a.data.shape) if need[0] else None,
            _unbroadcast(g, b.data.shape) if need[1] else None,
        )

    return _record(out, (a, b), bwd)


def sub(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    out = DenseTensor(a.data - b.data)

    def bwd(g, need):
        return (
            _unbroadcast(g, a.data.shape) if need[0] else None,
            _unbroadcast(-g, b.data.shape) if need[1] else None,
        )

    return _record(out, (a, b), bwd)


def mul(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    out = DenseTensor(a.data * b.data)

    def bwd(g, need):
        return (
            _unbroadcast(g * b.data, a.data.shape) if need[0] else None,
            _unbroadcast(g * a.data, b.data.shape) if need[1] else None,
        )

    return _record(out, (a, b), bwd)


def neg(a: DenseTensor) -> DenseTensor:
    out = DenseTensor(-a.data)
    return _record(out, (a,), lambda g, need: (-g,))


def scale(a: DenseTensor, s: float) -> DenseTensor:
    s = float(s)
    out = DenseTensor(a.data * s)
    return _record(out, (a,), lambda g, need: (g * s,))


def add_scalar(a: DenseTensor, s: float) -> DenseTensor:
    out = DenseTensor(a.data + float(s))
    return _record(out, (a,), lambda g, need: (g,))


def square(a: DenseTensor) -> DenseTensor:
    out = DenseTensor(a.data * a.data)
    return _record(out, (a,), lambda g, need: (2.0 * a.data * g,))


def log(a: DenseTensor) -> DenseTensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    out = DenseTensor(np.log(a.data))
    return _record(out, (a,), lambda g, need: (g / a.data,))


def clamp(a: DenseTensor, lo: float, hi: float) -> DenseTensor:
    out = DenseTensor(np.clip(a.data, lo, hi))
    inside = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return _record(out, (a,), lambda g, need: (g * inside,))


def gelu(a: DenseTensor) -> DenseTensor:
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = DenseTensor(x * cdf)

    def bwd(g, need):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _record(out, (a,), bwd)


def sum_(a: DenseTensor, axis: int | None = None) -> DenseTensor:
    if axis is None:
        out = DenseTensor(a.data.sum())

        def bwd(g, need):
            return (np.broadcast_to(g, a.data.shape).copy(),)

        return _record(out, (a,), bwd)
    if axis != -1:
        raise UsageError("sum supports axis=None or axis=-1")
    out = DenseTensor(a.data.sum(axis=-1))

    def bwd_axis(g, need):
        return (np.broadcast_to(np.expand_dims(g, -1), a.data.shape).copy(),)

    return _record(out, (a,), bwd_axis)


def mean(a: DenseTensor) -> DenseTensor:
    n = a.data.size
    out = DenseTensor(a.data.mean())

    def bwd(g, need):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _record(out, (a,), bwd)


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------

def matmul(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """Matrix product for 1D/2D operands with np.matmul semantics."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise UsageError(f"matmul supports 1D/2D operands, got {ad.ndim}D @ {bd.ndim}D")
    out = DenseTensor(ad @ bd)

    def bwd(g, need):
        if ad.ndim == 2 and bd.ndim == 2:
            ga = g @ bd.T if need[0] else None
            gb = ad.T @ g if need[1] else None
        elif ad.ndim == 1 and bd.ndim == 2:
            ga = bd @ g if need[0] else None
            gb = np.outer(ad, g) if need[1] else None
        elif ad.ndim == 2 and bd.ndim == 1:
            ga = np.outer(g, bd) if need[0] else None
            gb = ad.T @ g if need[1] else None
        else:  # 1D @ 1D -> scalar
            ga = g * bd if need[0] else None
            gb = g * ad if need[1] else None
        return (ga, gb)

    return _record(out, (a, b), bwd)


def take_row(m: DenseTensor, i: int) -> DenseTensor:
    if not 0 <= i < m.data.shape[0]:
        raise UsageError(f"row index {i} out of range for shape {m.data.shape}")
    out = DenseTensor(m.data[i].copy())

    def bwd(g, need):
        gm = np.zeros_like(m.data)
        gm[i] = g
        return (gm,)

    return _record(out, (m,), bwd)


def take_rows(m: DenseTensor, idx: Sequence[int]) -> DenseTensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= m.data.shape[0]):
        raise UsageError(f"row indices out of range for shape {m.data.shape}")
    out = DenseTensor(m.data[idx].copy())

    def bwd(g, need):
        gm = np.zeros_like(m.data)
        np.add.at(gm, idx, g)
        return (gm,)

    return _record(out, (m,), bwd)


def take_per_row(m: DenseTensor, cols) -> DenseTensor:
    """out[i] = m[i, cols[i]] for a 2D tensor and integer column indices."""
    cols = np.asarray(cols, dtype=np.intp)
    n = m.data.shape[0]
    if cols.shape != (n,):
        raise UsageError("take_per_row needs one column index per row")
    if cols.size and (cols.min() < 0 or cols.max() >= m.data.shape[1]):
        raise UsageError("column index out of range")
    rows = np.arange(n)
    out = DenseTensor(m.data[rows, cols].copy())

    def bwd(g, need):
        gm = np.zeros_like(m.data)
        gm[rows, cols] = g
        return (gm,)

    return _record(out, (m,), bwd)


def stack_rows(rows: Sequence[DenseTensor]) -> DenseTensor:
    if not rows:
        raise UsageError("stack_rows needs at least one row")
    out = DenseTensor(np.stack([r.data for r in rows], axis=0))

    def bwd(g, need):
        return tuple(g[i] if need[i] else None for i in range(len(rows)))

    return _record(out, tuple(rows), bwd)


def slice_rows(m: DenseTensor, start: int, stop: int) -> DenseTensor:
    out = DenseTensor(m.data[start:stop].copy())

    def bwd(g, need):
        gm = np.zeros_like(m.data)
        gm[start:stop] = g
        return (gm,)

    return _record(out, (m,), bwd)


def transpose(m: DenseTensor) -> DenseTensor:
    if m.data.ndim != 2:
        raise UsageError(f"transpose expects a 2D tensor, got shape {m.data.shape}")
    out = DenseTensor(m.data.T.copy())

    def bwd(g, need):
        return (g.T,)

    return _record(out, (m,), bwd)


# --------------------------------------------------------------------------
# Normalization, similarity, softmax family
# --------------------------------------------------------------------------

def l2_normalize(a: DenseTensor) -> DenseTensor:
    """Normalize a vector, or each row of a 2D tensor, to unit L2 norm."""
    x = a.data
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DomainError("l2_normalize: zero-norm input")
    y = x / norm
    out = DenseTensor(y)

    def bwd(g, need):
        dot = np.sum(y * g, axis=-1, keepdims=True)
        return ((g - y * dot) / norm,)

    return _record(out, (a,), bwd)


def cosine_sim(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """cos(a, b) = a.b / sqrt((a.a)(b.b)) for equal-length vectors; in [-1, 1].

    The denominator is computed as one sqrt of the product of squared norms:
    with round-to-nearest, sqrt(x*x) == x exactly, so cos(x, x) is exactly
    1.0 and self-alignment losses vanish to a true float zero.
    """
    av, bv = a.data, b.data
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape or av.size < 1:
        raise UsageError(f"cosine_sim needs equal-length vectors, got {av.shape} and {bv.shape}")
    sa = float(av @ av)
    sb = float(bv @ bv)
    if sa == 0.0:
        raise DomainError("cosine_sim: operand 'a' has zero norm")
    if sb == 0.0:
        raise DomainError("cosine_sim: operand 'b' has zero norm")
    ra = math.sqrt(sa)
    rb = math.sqrt(sb)
    c = float(av @ bv) / math.sqrt(sa * sb)
    out = DenseTensor(np.float64(c))

    def bwd(g, need):
        ga = g * (bv / (ra * rb) - c * av / (ra * ra)) if need[0] else None
        gb = g * (av / (ra * rb) - c * bv / (rb * rb)) if need[1] else None
        return (ga, gb)

    return _record(out, (a, b), bwd)


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0.0:
        raise DomainError(f"temperature must be positive, got {tau}")
    return tau


def softmax_with_temperature(logits: DenseTensor, tau: float) -> DenseTensor:
    """softmax(logits / tau) over the last axis, max-subtracted for stability."""
    tau = _check_tau(tau)
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = DenseTensor(s)

    def bwd(g, need):
        dot = np.sum(s * g, axis=-1, keepdims=True)
        return (s * (g - dot) / tau,)

    return _record(out, (logits,), bwd)


def log_softmax_with_temperature(logits: DenseTensor, tau: float) -> DenseTensor:
    """log softmax(logits / tau) over the last axis, computed stably."""
    tau = _check_tau(tau)
    z = logits.data / tau
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    s = np.exp(logp)
    out = DenseTensor(logp)

    def bwd(g, need):
        gsum = g.sum(axis=-1, keepdims=True)
        return ((g - s * gsum) / tau,)

    return _record(out, (logits,), bwd)


def logsumexp(a: DenseTensor) -> DenseTensor:
    """logsumexp over the last axis."""
    z = a.data
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    out_val = (np.log(e.sum(axis=-1)) + zmax.squeeze(-1)) if z.ndim > 1 else np.log(e.sum(-1)) + zmax.reshape(())
    s = e / e.sum(axis=-1, keepdims=True)
    out = DenseTensor(out_val)

    def bwd(g, need):
        return (s * np.expand_dims(g, -1) if z.ndim > 1 else s * g,)

    return _record(out, (a,), bwd)


def layernorm(x: DenseTensor, gain: DenseTensor, bias: DenseTensor, eps: float = 1e-5) -> DenseTensor:
    """LayerNorm over the last axis with per-feature gain and bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = DenseTensor(xhat * gain.data + bias.data)
    d = xd.shape[-1]

    def bwd(g, need):
        dxhat = g * gain.data
        gx = None
        if need[0]:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        ggain = None
        if need[1]:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0).reshape(gain.data.shape)
        gbias = None
        if need[2]:
            gbias = g.reshape(-1, d).sum(axis=0).reshape(bias.data.shape)
        return (gx, ggain, gbias)

    return _record(out, (x, gain, bias), bwd)


def multi_head_attention(
    x: DenseTensor,
    wq: DenseTensor, bq: DenseTensor,
    wk: DenseTensor, bk: DenseTensor,
    wv: DenseTensor, bv: DenseTensor,
    wo: DenseTensor, bo: DenseTensor,
    n_heads: int,
) -> DenseTensor:
    """Bidirectional scaled dot-product attention over a (L, d) sequence."""
    xd = x.data
    if xd.ndim != 2:
        raise UsageError(f"attention expects a (L, d) input, got shape {xd.shape}")
    L, d = xd.shape
    if d % n_heads != 0:
        raise UsageError(f"model width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    inv_sqrt_dh = 1.0 / np.sqrt(dh)

    q = xd @ wq.data + bq.data
    k = xd @ wk.data + bk.data
    v = xd @ wv.data + bv.data
    # (L, d) -> (h, L, dh)
    qh = q.reshape(L, n_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(L, n_heads, dh).transpose(1, 0, 2)
    vh = v.reshape(L, n_heads, dh).transpose(1, 0, 2)
    scores = np.einsum("hid,hjd->hij", qh, kh) * inv_sqrt_dh
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    oh = np.einsum("hij,hjd->hid", attn, vh)
    o = oh.transpose(1, 0, 2).reshape(L, d)
    out = DenseTensor(o @ wo.data + bo.data)

    def bwd(g, need):
        go = g @ wo.data.T  # (L, d) grad wrt concatenated head outputs
        gwo = o.T @ g if need[7] else None
        gbo = g.sum(axis=0) if need[8] else None
        goh = go.reshape(L, n_heads, dh).transpose(1, 0, 2)
        gattn = np.einsum("hid,hjd->hij", goh, vh)
        gvh = np.einsum("hij,hid->hjd", attn, goh)
        # softmax backward per row
        gscores = attn * (gattn - np.sum(gattn * attn, axis=-1, keepdims=True))
        gqh = np.einsum("hij,hjd->hid", gscores, kh) * inv_sqrt_dh
        gkh = np.einsum("hij,hid->hjd", gscores, qh) * inv_sqrt_dh
        gq = gqh.transpose(1, 0, 2).reshape(L, d)
        gk = gkh.transpose(1, 0, 2).reshape(L, d)
        gv = gvh.transpose(1, 0, 2).reshape(L, d)
        gx = None
        if need[0]:
            gx = gq @ wq.data.T + gk @ wk.data.T + gv @ wv.data.T
        gwq = xd.T @ gq if need[1] else None
        gbq = gq.sum(axis=0) if need[2] else None
        gwk = xd.T @ gk if need[3] else None
        gbk = gk.sum(axis=0) if need[4] else None
        gwv = xd.T @ gv if need[5] else None
        gbv = gv.sum(axis=0) if need[6] else None
        return (gx, gwq, gbq, gwk, gbk, gwv, gbv, gwo, gbo)

    return _record(out, (x, wq, bq, wk, bk, wv, bv, wo, bo), bwd)


# --------------------------------------------------------------------------
# Finite-difference oracle
# --------------------------------------------------------------------------

def grad_check(fn: Callable[[DenseTensor], DenseTensor], x: DenseTensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn must map a DenseTensor to a scalar DenseTensor. The numeric side
    evaluates fn without any tape, so it is independent of the reverse-mode
    path it checks. Error per coordinate is
    |analytic - central| / max(1e-8, |central|).
    """
    if not eps > 0:
        raise UsageError("eps must be positive")
    leaf = DenseTensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(leaf)
        tape.backward(y)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    flat = x.data.copy().reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(DenseTensor(flat.reshape(x.data.shape))).item()
        flat[i] = orig - eps
        lo = fn(DenseTensor(flat.reshape(x.data.shape))).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("grad_check: fn returned a non-finite value")
        central = (hi - lo) / (2.0 * eps)
        err = abs(analytic.reshape(-1)[i] - central) / max(1e-8, abs(central))
        worst = max(worst, err)
    return worst
