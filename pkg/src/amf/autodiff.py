"""Reverse-mode autodiff over dense numpy tensors.

Design notes that the gradient checks rely on:

- Storage dtype is float32 by default (float64 available for high-precision
  checks); every reduction (matmul, conv, pooling sums, softmax denominators)
  accumulates in float64 before casting back, so results are independent of
  internal blocking and bit-reproducible.
- Gradients are always held in float64.
- All randomness flows through ``new_rng``: the repo-wide PRNG is numpy's
  Philox counter-based generator, and gaussian fills draw in flat row-major
  index order.
- ReLU uses subgradient 0 at x == 0; maxpool ties break to the first element
  in row-major window order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_ids = itertools.count()


def new_rng(seed: int) -> np.random.Generator:
    """Repo-wide PRNG: Philox4x32 counter-based generator."""
    return np.random.Generator(np.random.Philox(seed))


class Tensor:
    """A dense n-d array node in the autodiff graph.

    Nodes are created in topological order (the creation counter ``_id``
    increases monotonically), so a backward sweep in decreasing id order
    visits each node exactly once after all of its consumers.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[], None] | None = None,
    ):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=np.float64)
        self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a scalar node; fills .grad on every reachable tensor."""
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        self.grad = np.ones(self.data.shape, dtype=np.float64)
        for t in sorted(nodes, key=lambda n: n._id, reverse=True):
            if t._backward is not None and t.grad is not None:
                t._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def tensor_create(
    shape: Sequence[int],
    fill: str = "zeros",
    value: float = 0.0,
    mean: float = 0.0,
    std: float = 1.0,
    seed: int = 0,
    dtype=None,
    requires_grad: bool = False,
) -> Tensor:
    """Create a tensor filled with zeros, a constant, or seeded gaussians.

    Gaussian fill draws from the Philox generator in flat row-major order.
    """
    shape = _check_shape(shape)
    dtype = dtype or DEFAULT_DTYPE
    if fill == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif fill == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif fill == "gaussian":
        if std < 0:
            raise ShapeError(f"std must be >= 0, got {std}")
        flat = new_rng(seed).normal(mean, std, size=int(np.prod(shape)))
        data = flat.reshape(shape).astype(dtype)
    else:
        raise UsageError(f"unknown fill kind {fill!r}")
    return Tensor(data, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out_data = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(a.dtype)
    out = Tensor(out_data, _parents=(a, b))

    def _backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.astype(np.float64).T)
        if b.requires_grad:
            b._accumulate(a.data.astype(np.float64).T @ g)

    out._backward = _backward
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias add: x[N,d] + b[d]."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias shapes incompatible: {x.shape} + {b.shape}")
    out = Tensor(x.data + b.data, _parents=(x, b))

    def _backward():
        g = out.grad
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    out._backward = _backward
    return out


def conv2d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """3x3 / stride-1 / same-padding cross-correlation.

    The contraction over (channel, kernel row, kernel column) runs as one
    float64 GEMM over im2col patches, giving a single fixed reduction path.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"kernel must be 3x3, got {kh}x{kw}")
    if cw != c:
        raise ShapeError(f"channel mismatch: input {c}, kernel {cw}")
    if bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} != ({f},)")

    # im2col + float64 GEMM; one deterministic reduction path for all shapes
    xp = np.zeros((n, c, h + 2, wd + 2), dtype=np.float64)
    xp[:, :, 1 : h + 1, 1 : wd + 1] = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * 9)
    w64 = w.data.reshape(f, c * 9).astype(np.float64)
    acc = (cols @ w64.T).reshape(n, h, wd, f).transpose(0, 3, 1, 2)
    acc = acc + bias.data.astype(np.float64)[None, :, None, None]
    out = Tensor(acc.astype(x.dtype), _parents=(x, w, bias))

    def _backward():
        g2 = out.grad.transpose(0, 2, 3, 1).reshape(n * h * wd, f)
        if x.requires_grad:
            dcols = (g2 @ w64).reshape(n, h, wd, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    dxp[:, :, i : i + h, j : j + wd] += dcols[:, :, i, j]
            x._accumulate(dxp[:, :, 1 : h + 1, 1 : wd + 1])
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(f, c, 3, 3))
        if bias.requires_grad:
            bias._accumulate(out.grad.sum(axis=(0, 2, 3)))

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), _parents=(x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(out.grad * (x.data > 0))

    out._backward = _backward
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling; ties route gradient to the first row-major position."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"spatial dims must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    # last axis holds the 2x2 window in row-major (kh, kw) order
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0], _parents=(x,))

    def _backward():
        if not x.requires_grad:
            return
        dwin = np.zeros((n, c, h2, w2, 4), dtype=np.float64)
        np.put_along_axis(dwin, arg[..., None], out.grad[..., None], axis=-1)
        dx = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accumulate(dx)

    out._backward = _backward
    return out


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    n = x.shape[0]
    out = Tensor(x.data.reshape(n, -1), _parents=(x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(out.grad.reshape(x.shape))

    out._backward = _backward
    return out


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation of [N, d_i] parts in branch order."""
    if not parts:
        raise ShapeError("concat of zero parts")
    n = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != n:
            raise ShapeError(f"concat batch mismatch: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1), _parents=tuple(parts))
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def _backward():
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(out.grad[:, lo:hi])

    out._backward = _backward
    return out


def scale_rows(m: Tensor, h: Tensor) -> Tensor:
    """Per-sample scalar scaling: z[s, j] = h[s, 0] * m[s, j]."""
    if h.data.ndim != 2 or h.shape[1] != 1 or h.shape[0] != m.shape[0]:
        raise ShapeError(f"scale_rows shapes incompatible: {m.shape}, {h.shape}")
    out = Tensor(m.data * h.data, _parents=(m, h))

    def _backward():
        g = out.grad
        if m.requires_grad:
            m._accumulate(g * h.data)
        if h.requires_grad:
            h._accumulate((g * m.data).sum(axis=1, keepdims=True))

    out._backward = _backward
    return out


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Column slice x[:, lo:hi], differentiable."""
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.shape[1]):
        raise ShapeError(f"bad column slice [{lo}:{hi}] of {x.shape}")
    out = Tensor(x.data[:, lo:hi].copy(), _parents=(x,))

    def _backward():
        if x.requires_grad:
            g = np.zeros(x.shape, dtype=np.float64)
            g[:, lo:hi] = out.grad
            x._accumulate(g)

    out._backward = _backward
    return out


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax expects [N, k], got {logits.shape}")
    p = _softmax64(logits.data)
    out = Tensor(p.astype(logits.dtype), _parents=(logits,))

    def _backward():
        if logits.requires_grad:
            g = out.grad
            logits._accumulate(p * (g - (g * p).sum(axis=1, keepdims=True)))

    out._backward = _backward
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood via log-sum-exp; backward is (softmax - onehot)/N."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels outside [0, {c})")
    z = logits.data.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = (lse - z[np.arange(n), labels]).mean()
    out = Tensor(np.asarray(loss, dtype=np.float64).reshape(()), _parents=(logits,))

    def _backward():
        if logits.requires_grad:
            p = _softmax64(logits.data)
            p[np.arange(n), labels] -= 1.0
            logits._accumulate(out.grad * p / n)

    out._backward = _backward
    return out


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.astype(np.float64).mean()).reshape(()), _parents=(x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(np.full(x.shape, out.grad / x.data.size, dtype=np.float64))

    out._backward = _backward
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.astype(np.float64).sum()).reshape(()), _parents=(x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(np.full(x.shape, out.grad, dtype=np.float64))

    out._backward = _backward
    return out


def grad_check(
    build_loss: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> dict:
    """Central finite differences vs analytic gradients.

    ``build_loss`` must rebuild the graph from the current parameter values on
    every call. Reports the max relative error over all parameter coordinates:
    |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise UsageError("eps must be > 0")
    params = list(params)
    loss = build_loss()
    for p in params:
        p.zero_grad()
    loss.backward()
    analytic = [np.array(p.grad if p.grad is not None else np.zeros(p.shape)) for p in params]

    max_rel = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(build_loss().data)
            flat[i] = orig - eps
            f_minus = float(build_loss().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * eps)
            an = a.reshape(-1)[i]
            rel = abs(an - num) / max(abs(an), abs(num), 1e-8)
            max_rel = max(max_rel, rel)
    return {"max_rel_err": max_rel, "passed": max_rel < tol, "tol": tol}
