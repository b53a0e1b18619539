"""Reverse-mode differentiation substrate.

A small tape-based autodiff layer over numpy providing exactly the
primitives the convolutional encoder-decoder needs: embedding lookup,
matrix multiply, 1-d convolution (symmetric or causal padding), gated
linear units, masked dot-product attention, log-softmax, dropout and
elementwise add/scale. Every primitive has an analytic backward pass;
tests verify each against central finite differences.

Tensors are plain numpy arrays wrapped with a gradient slot. Ops record
a backward closure on the active :class:`Tape`; :func:`backward` replays
the records in exact reverse execution order, accumulating gradients
additively. With no active tape, ops run forward-only (evaluation mode).
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "add",
    "scale",
    "matmul",
    "transpose",
    "embedding",
    "glu",
    "conv1d",
    "attention",
    "softmax",
    "log_softmax",
    "dropout",
    "pick",
    "tensor_sum",
]


class GradientError(ValueError):
    """A differentiation contract was violated (non-scalar loss, bad shapes)."""


class Tensor:
    """An n-dimensional real array with a gradient accumulator."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A named, trainable tensor. Tied parameters are one object used at
    several sites; gradient contributions from every site accumulate."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed primitives, replayed in reverse by
    :func:`backward`. Use as a context manager around the forward pass."""

    def __init__(self):
        self.records = []
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


def _record(fn):
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.records.append(fn)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, tape: Tape):
    """Populate gradients of everything reachable from ``loss``.

    ``loss`` must be scalar (shape ``()``); records run in exact reverse
    execution order and gradients accumulate additively. Parameters that
    never took part keep the zero gradient they were initialised with.
    """
    if loss.data.shape != ():
        raise GradientError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape.records):
        fn()


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition with numpy broadcasting (used for bias rows
    and residual connections)."""
    out = Tensor(a.data + b.data)

    def bwd():
        if out.grad is None:
            return
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    _record(bwd)
    return out


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a non-differentiated constant: a scalar or a
    broadcastable array (e.g. a 0/1 row mask)."""
    out = Tensor(x.data * c)

    def bwd():
        if out.grad is None:
            return
        _accum(x, _unbroadcast(out.grad * c, x.data.shape))

    _record(bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise GradientError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd():
        if out.grad is None:
            return
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    _record(bwd)
    return out


def transpose(x: Tensor) -> Tensor:
    out = Tensor(x.data.T.copy())

    def bwd():
        if out.grad is None:
            return
        _accum(x, out.grad.T)

    _record(bwd)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = Tensor(x.data.sum())

    def bwd():
        if out.grad is None:
            return
        _accum(x, np.full_like(x.data, out.grad))

    _record(bwd)
    return out


def pick(x: Tensor, ids: np.ndarray) -> Tensor:
    """Select ``x[t, ids[t]]`` for every row t (target log-prob gather)."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    out = Tensor(x.data[rows, ids])

    def bwd():
        if out.grad is None:
            return
        g = np.zeros_like(x.data)
        g[rows, ids] = out.grad
        _accum(x, g)

    _record(bwd)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise GradientError(
            f"embedding id out of range [0, {table.data.shape[0]})")
    out = Tensor(table.data[ids])

    def bwd():
        if out.grad is None:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, out.grad)

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: the first half of the
    channels is gated by the sigmoid of the second half."""
    c2 = x.data.shape[-1]
    if c2 % 2 != 0:
        raise GradientError(f"glu needs an even channel count, got {c2}")
    c = c2 // 2
    a = x.data[..., :c]
    b = x.data[..., c:]
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-b))
    out = Tensor(a * s)

    def bwd():
        if out.grad is None:
            return
        g = np.empty_like(x.data)
        g[..., :c] = out.grad * s
        g[..., c:] = out.grad * a * s * (1.0 - s)
        _accum(x, g)

    _record(bwd)
    return out


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    w = _softmax_rows(x.data)
    out = Tensor(w)

    def bwd():
        if out.grad is None:
            return
        inner = (out.grad * w).sum(axis=-1, keepdims=True)
        _accum(x, w * (out.grad - inner))

    _record(bwd)
    return out


def log_softmax(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(shifted - lse)

    def bwd():
        if out.grad is None:
            return
        gsum = out.grad.sum(axis=-1, keepdims=True)
        _accum(x, out.grad - np.exp(out.data) * gsum)

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# convolution


def conv1d(x: Tensor, kernel: Tensor, padding_mode: str = "symmetric") -> Tensor:
    """1-d cross-correlation over ``x`` of shape [time, channels_in] with a
    kernel of shape [width, channels_in, channels_out], zero padded so the
    time length is preserved.

    ``symmetric`` pads both sides (width must be odd); ``causal`` pads only
    on the left, so the output at position t never sees inputs after t.
    """
    T, cin = x.data.shape
    W, kin, cout = kernel.data.shape
    if cin != kin:
        raise GradientError(f"conv1d channel mismatch: input {cin}, kernel {kin}")
    if padding_mode == "symmetric":
        if W % 2 == 0:
            raise GradientError("symmetric conv1d needs an odd kernel width")
        left = right = (W - 1) // 2
    elif padding_mode == "causal":
        left, right = W - 1, 0
    else:
        raise GradientError(f"unknown padding mode {padding_mode!r}")

    xp = np.zeros((T + left + right, cin), dtype=x.data.dtype)
    xp[left:left + T] = x.data
    # im2col: windows[t, w, i] = xp[t + w, i]
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(T, W, cin), strides=(xp.strides[0],) + xp.strides)
    flat = windows.reshape(T, W * cin)
    kflat = kernel.data.reshape(W * cin, cout)
    out = Tensor(flat @ kflat)

    def bwd():
        if out.grad is None:
            return
        if kernel.grad is None:
            kernel.grad = np.zeros_like(kernel.data)
        kernel.grad += (flat.T @ out.grad).reshape(W, cin, cout)
        dflat = (out.grad @ kflat.T).reshape(T, W, cin)
        dxp = np.zeros_like(xp)
        for w in range(W):  # overlap-add back onto the padded input
            dxp[w:w + T] += dflat[:, w, :]
        _accum(x, dxp[left:left + T])

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# attention


def attention(queries: Tensor, keys: Tensor, values: Tensor,
              mask: np.ndarray | None = None):
    """Dot-product attention.

    Scores are query-key dot products; each row is softmax-normalised over
    the unmasked keys and used to form a weighted sum of the values.
    ``mask[i, j]`` True means query i may attend to key j. Every query row
    must keep at least one unmasked key.

    Returns ``(context, weights)``, both differentiable.
    """
    scores = queries.data @ keys.data.T
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape:
            raise GradientError(
                f"mask shape {mask.shape} does not match scores {scores.shape}")
        if not mask.any(axis=1).all():
            raise GradientError("attention mask leaves a query row fully masked")
        scores = np.where(mask, scores, -np.inf)
    w = _softmax_rows(scores)
    ctx = Tensor(w @ values.data)
    weights = Tensor(w)

    def bwd():
        dw = None
        if ctx.grad is not None:
            dw = ctx.grad @ values.data.T
            _accum(values, w.T @ ctx.grad)
        if weights.grad is not None:
            dw = weights.grad if dw is None else dw + weights.grad
        if dw is None:
            return
        inner = (dw * w).sum(axis=-1, keepdims=True)
        ds = w * (dw - inner)  # zero wherever a key is masked out
        _accum(queries, ds @ keys.data)
        _accum(keys, ds.T @ queries.data)

    _record(bwd)
    return ctx, weights


# ---------------------------------------------------------------------------
# regularisation


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Inverted dropout: Bernoulli mask scaled by 1/(1-rate) at train time,
    identity in evaluation mode."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise GradientError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    inv = keep / (1.0 - rate)
    out = Tensor(x.data * inv)

    def bwd():
        if out.grad is None:
            return
        _accum(x, out.grad * inv)

    _record(bwd)
    return out


RESIDUAL_SCALE = math.sqrt(0.5)


def residual(a: Tensor, b: Tensor) -> Tensor:
    """Residual combination ``(a + b) * sqrt(0.5)``, the variance-preserving
    layer input/output add used throughout the network."""
    return scale(add(a, b), RESIDUAL_SCALE)
