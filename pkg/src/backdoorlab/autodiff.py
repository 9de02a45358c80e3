"""Minimal dense-tensor numerics with reverse-mode differentiation.

Everything is float64 and CPU-only. Operations build a computation graph
through parent links; ``backward`` walks it once in reverse topological
order and accumulates gradients into trainable :class:`Parameter` buffers.
Convolutions are valid (no padding) with optional stride, which is all the
small backbones in this package need.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array plus an optional gradient buffer.

    Tensors produced by operations remember their parents and a backward
    closure; leaf tensors have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor with a preallocated gradient buffer."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0.0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _result(data, parents, backward_fn) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable gradient buffer.

    ``loss`` must be a scalar produced by a recorded forward pass; running
    backward twice on the same node is an error because the graph is
    released after the first traversal.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already ran for this node; re-record the forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")

    # Iterative topological sort over the recorded graph.
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
            node._parents = ()
            node._backward = None
    loss._backward_done = True


# ---------------------------------------------------------------------------
# primitives

def affine(x, weight, bias) -> Tensor:
    """out[b, o] = sum_i x[b, i] * weight[i, o] + bias[o]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(
            f"affine expects x[B,I], weight[I,O], bias[O]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(
            f"affine shape mismatch: x {x.shape} vs weight {weight.shape} vs bias {bias.shape}"
        )
    out = x.data @ weight.data + bias.data

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, x.data.T @ g)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return _result(out, (x, weight, bias), bwd)


def _conv_extent(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def conv2d(x, kernel, stride: int = 1) -> Tensor:
    """Valid cross-correlation of x[B,C,H,W] with kernel[F,C,kh,kw]."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects x[B,C,H,W], kernel[F,C,kh,kw]; got {x.shape}, {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh > H or kw > W:
        raise ShapeError(f"kernel {kernel.shape} larger than input {x.shape}")
    Ho, Wo = _conv_extent(H, kh, stride), _conv_extent(W, kw, stride)

    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,fcij->bfhw", windows, kernel.data, optimize=True)

    def bwd(g):
        if kernel.requires_grad:
            _accumulate(kernel, np.einsum("bchwij,bfhw->fcij", windows, g, optimize=True))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += np.einsum(
                        "bfhw,fc->bchw", g, kernel.data[:, :, i, j], optimize=True
                    )
            _accumulate(x, gx)

    return _result(out, (x, kernel), bwd)


def conv1d(x, kernel, stride: int = 1) -> Tensor:
    """Valid cross-correlation of x[B,C,T] with kernel[F,C,k]."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects x[B,C,T], kernel[F,C,k]; got {x.shape}, {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    B, C, T = x.shape
    F, Ck, k = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if k > T:
        raise ShapeError(f"kernel {kernel.shape} larger than input {x.shape}")
    To = _conv_extent(T, k, stride)

    windows = sliding_window_view(x.data, k, axis=2)[:, :, ::stride]
    out = np.einsum("bctk,fck->bft", windows, kernel.data, optimize=True)

    def bwd(g):
        if kernel.requires_grad:
            _accumulate(kernel, np.einsum("bctk,bft->fck", windows, g, optimize=True))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(k):
                gx[:, :, i : i + stride * To : stride] += np.einsum(
                    "bft,fc->bct", g, kernel.data[:, :, i], optimize=True
                )
            _accumulate(x, gx)

    return _result(out, (x, kernel), bwd)


def relu(x) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken as 0."""
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def bwd(g):
        _accumulate(x, g * mask)

    return _result(out, (x,), bwd)


def max_pool2d(x, size: int = 2, stride: int | None = None) -> Tensor:
    """Window maximum over x[B,C,H,W]; gradient routes to the argmax only."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects x[B,C,H,W], got {x.shape}")
    stride = size if stride is None else stride
    B, C, H, W = x.shape
    if size > H or size > W:
        raise ShapeError(f"pool window {size} larger than input {x.shape}")
    Ho, Wo = _conv_extent(H, size, stride), _conv_extent(W, size, stride)

    windows = sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(B, C, Ho, Wo, size * size)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        for o in range(size * size):
            i, j = divmod(o, size)
            contrib = g * (arg == o)
            gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += contrib
        _accumulate(x, gx)

    return _result(out, (x,), bwd)


def max_pool1d(x, size: int = 2, stride: int | None = None) -> Tensor:
    """Window maximum over x[B,C,T]; gradient routes to the argmax only."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"max_pool1d expects x[B,C,T], got {x.shape}")
    stride = size if stride is None else stride
    B, C, T = x.shape
    if size > T:
        raise ShapeError(f"pool window {size} larger than input {x.shape}")
    To = _conv_extent(T, size, stride)

    windows = sliding_window_view(x.data, size, axis=2)[:, :, ::stride]
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        for o in range(size):
            gx[:, :, o : o + stride * To : stride] += g * (arg == o)
        _accumulate(x, gx)

    return _result(out, (x,), bwd)


def global_average_pool(x) -> Tensor:
    """Mean over all spatial axes of x[B,C,...] -> [B,C]."""
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_average_pool expects x[B,C,T] or x[B,C,H,W], got {x.shape}")
    spatial = tuple(range(2, x.ndim))
    count = int(np.prod([x.shape[a] for a in spatial]))
    out = x.data.mean(axis=spatial)

    def bwd(g):
        shape = g.shape + (1,) * len(spatial)
        _accumulate(x, np.broadcast_to(g.reshape(shape) / count, x.shape).copy())

    return _result(out, (x,), bwd)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stabilized softmax of a plain array (no graph)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[Tensor, Tensor]:
    """Cross-entropy against integer class labels.

    Returns ``(per_sample, mean)``: per-sample losses are detached (the
    loss ledger records them); the mean is differentiable with gradient
    (softmax - one_hot) / B on the logits.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects logits[B,C], got {logits.shape}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    bad = np.nonzero((labels < 0) | (labels >= C))[0]
    if bad.size:
        raise ValueError(f"label {labels[bad[0]]} out of range [0,{C}) at sample index {bad[0]}")
    labels = labels.astype(np.int64)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    sum_e = e.sum(axis=1, keepdims=True)
    per = np.log(sum_e)[:, 0] - z[np.arange(B), labels]
    probs = e / sum_e

    def bwd(g):
        grad = probs.copy()
        grad[np.arange(B), labels] -= 1.0
        _accumulate(logits, grad * (float(g) / B))

    mean = _result(np.float64(per.mean()), (logits,), bwd)
    return Tensor(per.copy()), mean


# ---------------------------------------------------------------------------
# scalar graph helpers

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _result(a.data + b.data, (a, b), bwd)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)

    def bwd(g):
        _accumulate(x, g * c)

    return _result(x.data * c, (x,), bwd)


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)

    def bwd(g):
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _result(np.float64(x.data.sum()), (x,), bwd)


# ---------------------------------------------------------------------------
# optimizer

class SGD:
    """Momentum SGD: v <- momentum*v + grad; value <- value - lr*v.

    Gradients are left in place after ``step``; call ``zero_grad`` before
    the next forward/backward cycle.
    """

    def __init__(self, params, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {momentum}")
        seen = set()
        self.params: list[Parameter] = []
        for p in params:
            if not isinstance(p, Parameter):
                raise TypeError("SGD expects Parameter instances")
            if id(p) not in seen:
                seen.add(id(p))
                self.params.append(p)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self._velocity):
            if not p.trainable:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
