"""Minimal reverse-mode automatic differentiation over dense float tensors.

Every differentiable value is a :class:`Tensor` wrapping a numpy array. Ops
record their parents and a closure mapping the output adjoint to parent
adjoints; :func:`backward` replays those closures in reverse topological
order (the tape). Layout is row-major ``B x C x H x W`` throughout.

Shapes must match exactly for elementwise ops. The only implicit broadcast is
the per-channel bias add inside :func:`conv2d` and :func:`linear`; anything
else goes through the explicit :func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "add",
    "backward",
    "broadcast_to",
    "conv2d",
    "finite_diff_check",
    "global_avg_pool",
    "linear",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax_cross_entropy",
    "sub",
    "tensor_sum",
    "topological_order",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float array that optionally records how it was computed.

    ``grad`` has the same shape as ``data`` once populated by :func:`backward`
    and accumulates across calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), "scale", lambda g: (g * g.dtype.type(c),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _make(data, (a,), "reshape", lambda g: (g.reshape(old),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; size-1 axes of ``a`` are expanded to ``shape``."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        bad = [i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t and s != 1]
        raise DimensionError(f"broadcast_to: {a.shape} -> {shape} invalid on axes {bad or 'rank'}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    data = np.broadcast_to(a.data, shape)

    def bw(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make(np.ascontiguousarray(data), (a,), "broadcast_to", bw)


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), "sum", lambda g: (np.full(shape, g, dtype=a.dtype),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum propagates NaN so the non-finite diagnostic can see it
    return _make(np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,), "relu", lambda g: (g * mask,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _make(s, (x,), "sigmoid", lambda g: (g * s * (1 - s),))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # [B, C, H, W] -> [B*Ho*Wo, C*kh*kw]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input channels (axis 1) {cin} != weight in-channels (axis 1) {wcin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},) (weight axis 0)")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input on axes (2, 3) of {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    # stacked per-sample products keep each sample's result independent of batch size
    out = cols.reshape(b, ho * wo, -1) @ wmat.T
    out += bias.data
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(b, ho, wo, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    return _make(out, (x, weight, bias), "conv2d", bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [B, C, H, W] -> [B, C]."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    n = h * w
    out = x.data.reshape(b, c, n).mean(axis=2)

    def bw(g):
        return (np.broadcast_to((g / g.dtype.type(n))[:, :, None, None], x.shape).copy(),)

    return _make(out, (x,), "global_avg_pool", bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W.T + b`` for x [B, n], W [m, n], b [m]."""
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape} (inner axis)")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    # per-element reductions: each logit is independent of batch size and row order
    out = (xd[:, None, :] * wd[None, :, :]).sum(axis=2) + bias.data

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make(out, (x, weight, bias), "linear", bw)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_np(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    bsz, ncls = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise IndexError(f"softmax_cross_entropy: labels must lie in [0, {ncls}), got {labels.tolist()}")
    logp = log_softmax_np(logits.data)
    rows = np.arange(bsz)
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / bsz),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "softmax_cross_entropy", bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through recorded ops, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every tracked ancestor."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    ``f`` must build its graph from the tensor it is given; ``x`` is not modified.
    """
    base = np.array(x.data, dtype=x.dtype)
    probe = Tensor(base.copy(), requires_grad=True)
    backward(f(probe))
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad.reshape(-1)

    flat = base.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            plus = flat.copy()
            plus[i] += eps
            minus = flat.copy()
            minus[i] -= eps
            fp = float(f(Tensor(plus.reshape(base.shape))).data)
            fm = float(f(Tensor(minus.reshape(base.shape))).data)
            numeric = (fp - fm) / (2 * eps)
            err = abs(float(analytic.reshape(-1)[i]) - numeric) / max(1e-12, abs(numeric))
            worst = max(worst, err)
    return worst


def parameters_grad_zero(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
