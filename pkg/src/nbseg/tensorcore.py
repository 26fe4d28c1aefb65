"""Small reverse-mode autodiff engine for the NB network.

Only the operators the encoder-decoder needs are provided. Tensors are
NHWC (batch, height, width, channels) numpy arrays wrapped in :class:`Tensor`
nodes; each op records a closure mapping the upstream gradient to gradients
for its parents.

All randomness flows through an explicit ``numpy.random.Generator`` backed by
PCG64, created with :func:`make_rng`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError

SELU_LAMBDA = 1.0507
SELU_ALPHA = 1.6733
LOG_CLAMP = 1e-12


def make_rng(seed, *keys) -> np.random.Generator:
    """PCG64 generator; extra integer keys derive independent substreams."""
    if keys:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))
    return np.random.Generator(np.random.PCG64(int(seed)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name
        self.grad = np.zeros_like(self.data) if (self.requires_grad and not self._parents) else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``.

        ``grad`` is the upstream gradient; it defaults to ones, which for a
        scalar loss is the usual seed and for a non-scalar output gives the
        gradient of its sum.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise InvalidArgumentError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=parents if req else (), backward=backward if req else None)


# ---------------------------------------------------------------------------
# initialisation


def glorot_uniform_init(fan_in: int, fan_out: int, shape, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Sample weights uniformly on +-sqrt(6)/sqrt(fan_in + fan_out).

    For a k x k convolution callers pass ``fan_in = k*k*c_in`` and
    ``fan_out = k*k*c_out``.
    """
    if fan_in < 1 or fan_out < 1:
        raise InvalidArgumentError(f"fan_in and fan_out must be positive, got {fan_in}, {fan_out}")
    bound = math.sqrt(6.0) / math.sqrt(fan_in + fan_out)
    data = rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)
    return Tensor(data, requires_grad=True)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0) / math.sqrt(fan_in + fan_out)


# ---------------------------------------------------------------------------
# elementwise


def selu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data if x.data.dtype.kind == "f" else x.data.astype(np.float64)
    pos = xd > 0
    lam = xd.dtype.type(SELU_LAMBDA)
    la = xd.dtype.type(SELU_LAMBDA * SELU_ALPHA)
    ex = np.minimum(xd, 0)
    np.exp(ex, out=ex)
    out = ex - 1
    out *= la
    np.copyto(out, xd * lam, where=pos)

    def backward(g):
        d = ex * la
        np.copyto(d, lam, where=pos)
        d *= g
        return (d,)

    return _node(out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so inference is identity."""
    if not 0 <= rate < 1:
        raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or rate == 0:
        return x
    if rng is None:
        raise InvalidArgumentError("training-mode dropout needs an rng")
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.data.dtype) * scale

    def backward(g):
        return (g * mask,)

    return _node(x.data * mask, (x,), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[-1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=-1))

    return _node(out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """'same' cross-correlation, NHWC input and (k, k, Cin, Cout) kernel."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise InvalidArgumentError(f"conv2d_same expects 4-D x and w, got {x.shape} and {w.shape}")
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0:
        raise InvalidArgumentError(f"kernel must be square and odd, got {k}x{k2}")
    if x.shape[3] != cin:
        raise InvalidArgumentError(f"input has {x.shape[3]} channels, kernel expects {cin}")
    if b.shape != (cout,):
        raise InvalidArgumentError(f"bias shape {b.shape} != ({cout},)")
    B, H, W, _ = x.shape
    p = (k - 1) // 2
    wd = w.data
    # One matmul per kernel tap on a shifted view; cheaper than a full
    # im2col buffer for the low channel counts used here.
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    dtype = np.result_type(xp, wd, b.data)
    out = np.zeros((B, H, W, cout), dtype=dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + H, j:j + W, :] @ wd[i, j]
    out += b.data

    def backward(g):
        g2 = g.reshape(B * H * W, cout)
        gw = gx = None
        if w.requires_grad:
            gw = np.empty(wd.shape, dtype=np.result_type(xp, g))
            for i in range(k):
                for j in range(k):
                    gw[i, j] = xp[:, i:i + H, j:j + W, :].reshape(-1, cin).T @ g2
        gb = g2.sum(axis=0) if b.requires_grad else None
        if x.requires_grad:
            gxp = np.zeros((B, H + 2 * p, W + 2 * p, cin), dtype=np.result_type(g, wd))
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + H, j:j + W, :] += g @ wd[i, j].T
            gx = gxp[:, p:p + H, p:p + W, :] if p else gxp
        return gx, gw, gb

    return _node(out, (x, w, b), backward)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; ties route the gradient to the first
    (row-major) maximum of the window."""
    x = _as_tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise InvalidArgumentError(f"max_pool2 needs even spatial extents, got {H}x{W}")
    win = x.data.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = (arg[..., None] == np.arange(4)).astype(g.dtype) * g[..., None]
        gx = onehot.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)
        return (gx,)

    return _node(out, (x,), backward)


def transposed_conv2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-2 transposed convolution with a (2, 2, Cin, Cout) kernel.

    Windows do not overlap, so output pixel (2i+di, 2j+dj) is
    ``x[i, j] @ w[di, dj] + b``.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[:2] != (2, 2):
        raise InvalidArgumentError(f"transposed_conv2 expects 4-D x and a 2x2 kernel, got {x.shape}, {w.shape}")
    B, H, W, cin = x.shape
    if w.shape[2] != cin:
        raise InvalidArgumentError(f"input has {cin} channels, kernel expects {w.shape[2]}")
    cout = w.shape[3]
    if b.shape != (cout,):
        raise InvalidArgumentError(f"bias shape {b.shape} != ({cout},)")
    x2 = x.data.reshape(B * H * W, cin)
    wm = w.data.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    y = (x2 @ wm).reshape(B, H, W, 2, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(B, 2 * H, 2 * W, cout)
    out = y + b.data

    def backward(g):
        g2 = g.reshape(B, H, 2, W, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(B * H * W, 4 * cout)
        gx = (g2 @ wm.T).reshape(x.shape) if x.requires_grad else None
        gw = (x2.T @ g2).reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3) if w.requires_grad else None
        gb = g.reshape(-1, cout).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# output head and loss


def softmax_channels(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), backward)


def check_one_hot(target: np.ndarray) -> None:
    t = np.asarray(target)
    if not np.all((t == 0) | (t == 1)) or not np.all(t.sum(axis=-1) == 1):
        raise InvalidArgumentError("target is not one-hot along the channel axis")


def weighted_cross_entropy(probs: Tensor, target, weights) -> Tensor:
    """Weighted negative log-likelihood, averaged over batch and pixels.

    ``loss = -sum(W * log p_t) / (B * H * W)`` with ``p_t`` clamped below at
    1e-12. ``weights`` is an (H, W) map broadcast over the batch, or a full
    (B, H, W) array.
    """
    probs = _as_tensor(probs)
    target = np.asarray(target)
    if target.shape != probs.shape:
        raise InvalidArgumentError(f"target shape {target.shape} != probs shape {probs.shape}")
    check_one_hot(target)
    B, H, W, _ = probs.shape
    wts = np.broadcast_to(np.asarray(weights, dtype=probs.dtype), (B, H, W))
    n = B * H * W
    pt = (probs.data * target).sum(axis=-1)
    clamped = pt < LOG_CLAMP
    logpt = np.log(np.maximum(pt, LOG_CLAMP))
    loss = -(wts * logpt).sum(dtype=np.float64) / n
    out = np.asarray(loss, dtype=probs.dtype)

    def backward(g):
        safe = np.where(clamped, 1.0, pt)
        coef = np.where(clamped, 0.0, -wts / (n * safe)) * g
        return ((coef[..., None] * target).astype(probs.dtype),)

    return _node(out, (probs,), backward)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: Optional[list] = field(default=None, repr=False)
    v: Optional[list] = field(default=None, repr=False)

    @property
    def initialized(self):
        return self.m is not None and self.v is not None


def init_adam(params: Sequence[Tensor], learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8) -> AdamState:
    return AdamState(
        learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update applied in place; returns (params, state)."""
    if not state.initialized:
        raise InvalidStateError("Adam state has no moment buffers; create it with init_adam(params)")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise InvalidArgumentError("params, grads and Adam buffers differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise InvalidArgumentError(f"shape mismatch in Adam step: param {p.data.shape}, grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)).astype(p.data.dtype)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    op: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    probe=None,
    indices=None,
    numeric_dtype=np.float64,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar checked is ``sum(probe * op(x))`` (``probe`` defaults to ones).
    The analytic gradient is computed at ``x``'s own precision; the numeric
    one perturbs a ``numeric_dtype`` copy of ``x`` in place, so ``op`` may be
    a closure over ``x`` (e.g. a network parameter). ``indices`` restricts
    the check to a subset of flat element indices.
    """
    if not x.requires_grad:
        raise InvalidArgumentError("finite_diff_check needs a tensor with requires_grad=True")
    x.zero_grad()
    out = op(x)
    seed = np.ones_like(out.data) if probe is None else np.asarray(probe, dtype=out.data.dtype)
    out.backward(np.broadcast_to(seed, out.shape).copy())
    analytic = x.grad.reshape(-1).astype(np.float64)

    original = x.data
    work = original.astype(numeric_dtype, copy=True)
    flat = work.reshape(-1)
    probe64 = None if probe is None else np.asarray(probe, dtype=np.float64)

    def value():
        y = op(x).data.astype(np.float64)
        return float(y.sum() if probe64 is None else (y * probe64).sum())

    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    try:
        x.data = work
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    finally:
        x.data = original
        x.zero_grad()
    return worst
