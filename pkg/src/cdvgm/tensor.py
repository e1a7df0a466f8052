"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into every tensor that requested them.
All arithmetic is float64 throughout; there is no implicit down-casting.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / numeric probes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    """Node in the differentiation graph.

    ``_backward`` maps the upstream gradient to one gradient array per
    parent (``None`` for parents that need nothing). Leaves have no
    ``_backward``; their ``grad`` attribute accumulates across calls until
    ``zero_grad`` resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], tuple]) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward pass --------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``grad`` for every tensor on the
        tape that requires gradients. ``self`` must hold exactly one element.
        Repeated calls without ``zero_grad`` keep adding.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg

    # -- elementwise arithmetic -----------------------------------------------

    def __add__(self, other) -> "Tensor":
        a, b = self, Tensor._lift(other)
        return Tensor._make(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        a, b = self, Tensor._lift(other)
        return Tensor._make(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other) - self

    def __mul__(self, other) -> "Tensor":
        a, b = self, Tensor._lift(other)
        return Tensor._make(
            a.data * b.data, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape),
                       _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        a, b = self, Tensor._lift(other)
        return Tensor._make(
            a.data / b.data, (a, b),
            lambda g: (_unbroadcast(g / b.data, a.shape),
                       _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._lift(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        p = float(exponent)
        x = self
        return Tensor._make(
            x.data ** p, (x,),
            lambda g: (g * p * x.data ** (p - 1.0),))

    # -- elementwise functions ------------------------------------------------

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        return Tensor._make(np.log(self.data), (self,),
                            lambda g: (g / self.data,))

    def log1p(self) -> "Tensor":
        return Tensor._make(np.log1p(self.data), (self,),
                            lambda g: (g / (1.0 + self.data),))

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)
        return Tensor._make(y, (self,), lambda g: (g * 0.5 / y,))

    def sin(self) -> "Tensor":
        return Tensor._make(np.sin(self.data), (self,),
                            lambda g: (g * np.cos(self.data),))

    def abs(self) -> "Tensor":
        return Tensor._make(np.abs(self.data), (self,),
                            lambda g: (g * np.sign(self.data),))

    def sigmoid(self) -> "Tensor":
        # Branch on sign so neither exp overflows.
        x = self.data
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return Tensor._make(y, (self,), lambda g: (g * y * (1.0 - y),))

    def leaky_relu(self, slope: float = 0.01) -> "Tensor":
        mask = np.where(self.data > 0, 1.0, slope)
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def clamp_min(self, lo: float) -> "Tensor":
        mask = (self.data > lo).astype(np.float64)
        return Tensor._make(np.maximum(self.data, lo), (self,),
                            lambda g: (g * mask,))

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, x.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, x.shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims),
                            (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self) -> "Tensor":
        """Maximum over all elements; gradient flows to the first argmax only,
        so tied maxima still give a deterministic backward pass."""
        x = self
        idx = int(np.argmax(self.data))

        def backward(g):
            gx = np.zeros_like(x.data)
            gx.flat[idx] = g if np.ndim(g) == 0 else g.item()
            return (gx,)

        return Tensor._make(np.asarray(self.data.max()), (x,), backward)

    # -- shape manipulation -----------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._make(self.data.reshape(shape), (self,),
                            lambda g: (g.reshape(x.shape),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,),
                            lambda g: (g.transpose(inverse),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, key) -> "Tensor":
        x = self

        def backward(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, key, g)
            return (gx,)

        return Tensor._make(self.data[key], (self,), backward)


# -- multi-tensor and structured operations ------------------------------------


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    parts = [Tensor._lift(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, offsets, axis=axis))

    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis),
                        parts, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking rules (leading batch dims broadcast).

    Both operands must be at least 2-D; promote vectors explicitly so the
    backward rule stays a plain transpose-multiply.
    """
    a, b = Tensor._lift(a), Tensor._lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors with ndim >= 2")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(a.data @ b.data, (a, b), backward)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution over the channel axis of a (B, C_in, N, T) tensor.

    ``weight`` is (C_out, C_in); ``bias`` is (C_out,) and optional.
    """
    x, weight = Tensor._lift(x), Tensor._lift(weight)
    y = np.einsum("oc,bcnt->bont", weight.data, x.data)
    if bias is None:
        def backward(g):
            return (np.einsum("oc,bont->bcnt", weight.data, g),
                    np.einsum("bont,bcnt->oc", g, x.data))
        return Tensor._make(y, (x, weight), backward)

    bias = Tensor._lift(bias)
    y = y + bias.data[None, :, None, None]

    def backward(g):
        return (np.einsum("oc,bont->bcnt", weight.data, g),
                np.einsum("bont,bcnt->oc", g, x.data),
                g.sum(axis=(0, 2, 3)))

    return Tensor._make(y, (x, weight, bias), backward)


def temporal_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                  dilation: int = 1, causal: bool = False) -> Tensor:
    """Convolution along the last (time) axis of a (B, C_in, N, T) tensor.

    ``weight`` is (C_out, C_in, K). Causal mode left-pads with
    ``dilation * (K - 1)`` zeros so the output keeps length T and position t
    never sees inputs later than t. Unpadded mode shortens the axis to
    ``T - dilation * (K - 1)``, which must stay positive.
    """
    x, weight = Tensor._lift(x), Tensor._lift(weight)
    k = weight.data.shape[2]
    span = dilation * (k - 1)
    t_in = x.data.shape[3]
    if not causal and t_in - span <= 0:
        raise ValueError(
            f"temporal_conv: length {t_in} too short for kernel {k} "
            f"with dilation {dilation}")

    if causal:
        pad = np.zeros(x.data.shape[:3] + (span,), dtype=np.float64)
        xp = np.concatenate([pad, x.data], axis=3)
    else:
        xp = x.data
    t_out = xp.shape[3] - span

    batch, _, nodes, _ = x.data.shape
    y = np.zeros((batch, weight.data.shape[0], nodes, t_out), dtype=np.float64)
    for j in range(k):
        tap = xp[:, :, :, j * dilation: j * dilation + t_out]
        y += np.einsum("oc,bcnt->bont", weight.data[:, :, j], tap)

    def backward_xw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for j in range(k):
            sl = slice(j * dilation, j * dilation + t_out)
            gxp[:, :, :, sl] += np.einsum("oc,bont->bcnt",
                                          weight.data[:, :, j], g)
            gw[:, :, j] = np.einsum("bont,bcnt->oc", g, xp[:, :, :, sl])
        gx = gxp[:, :, :, span:] if causal else gxp
        return np.ascontiguousarray(gx), gw

    if bias is None:
        return Tensor._make(y, (x, weight), lambda g: backward_xw(g))

    bias = Tensor._lift(bias)
    y = y + bias.data[None, :, None, None]

    def backward(g):
        gx, gw = backward_xw(g)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make(y, (x, weight, bias), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically shifted softmax along ``axis``.

    The max subtraction is a constant shift (softmax is invariant to it),
    so no gradient flows through the shift itself.
    """
    x = Tensor._lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor._make(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               norm_axes: tuple[int, ...] = (1,), eps: float = 1e-5) -> Tensor:
    """Normalize over ``norm_axes`` to zero mean / unit (biased) variance,
    then scale by ``gamma`` and shift by ``beta``. Composed from
    differentiable primitives, so the gradient is correct by construction."""
    total = float(np.prod([x.shape[a] for a in norm_axes]))
    mu = x.sum(axis=norm_axes, keepdims=True) * (1.0 / total)
    centered = x - mu
    var = (centered * centered).sum(axis=norm_axes, keepdims=True) * (1.0 / total)
    inv = (var + eps) ** -0.5
    return centered * inv * gamma + beta


class BatchNormState:
    """Running statistics and trained affine parameters for batch norm.

    ``shape`` is the per-feature shape normalized over the batch axis, e.g.
    (T, T) for attention score maps. Running buffers update with momentum
    0.9 in training mode and are plain numpy state (never differentiated).
    """

    def __init__(self, shape: tuple[int, ...], affine: bool = False,
                 momentum: float = 0.9, eps: float = 1e-5):
        self.running_mean = np.zeros(shape, dtype=np.float64)
        self.running_var = np.ones(shape, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps
        self.affine = affine
        self.gamma = Tensor(np.ones(shape), requires_grad=True) if affine else None
        self.beta = Tensor(np.zeros(shape), requires_grad=True) if affine else None

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta] if self.affine else []


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize over axis 0 using batch statistics (training) or the running
    buffers (evaluation). Training mode uses biased variance and refreshes the
    buffers as a side effect."""
    if training:
        mu = x.mean(axis=0, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=0, keepdims=True)
        state.running_mean = (state.momentum * state.running_mean
                              + (1.0 - state.momentum) * mu.data[0])
        state.running_var = (state.momentum * state.running_var
                             + (1.0 - state.momentum) * var.data[0])
        y = centered * ((var + state.eps) ** -0.5)
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        y = (x - Tensor(state.running_mean)) * Tensor(inv)
    if state.affine:
        y = y * state.gamma + state.beta
    return y


def finite_diff_check(fn: Callable[[Tensor], Tensor], x,
                      eps: float = 1e-5) -> float:
    """Largest relative disagreement between the analytic gradient of
    ``fn`` (reduced to a scalar by summation if needed) and central finite
    differences at ``x`` (array or Tensor).

    Relative error uses max(|analytic|, |numeric|, 1e-8) in the denominator
    so near-zero coordinates compare on an absolute scale.
    """
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    out = fn(leaf)
    if out.data.size != 1:
        out = out.sum()
    out.backward()
    analytic = np.zeros_like(x) if leaf.grad is None else leaf.grad

    numeric = np.zeros_like(x)
    flat = numeric.reshape(-1)
    base = x.copy().reshape(-1)
    with no_grad():
        for i in range(base.size):
            orig = base[i]
            base[i] = orig + eps
            hi = fn(Tensor(base.reshape(x.shape).copy()))
            hi = hi.data.sum()
            base[i] = orig - eps
            lo = fn(Tensor(base.reshape(x.shape).copy()))
            lo = lo.data.sum()
            base[i] = orig
            flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
