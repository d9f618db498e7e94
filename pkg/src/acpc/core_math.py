"""Small numpy tensor library with tape-based reverse-mode differentiation.

Only the operations the encoder, context network, prediction heads and the
contrastive/alignment losses need are provided.  Operations are coarse
(a whole strided convolution, a whole recurrent sweep) so that the Python
overhead per training step stays small.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import sparse

# Log-probability of an impossible event.  Handled explicitly by logsumexp
# and by the alignment recursions, never replaced by a finite constant.
IMPOSSIBLE = -np.inf

PRECISIONS = {"train": np.float32, "verify": np.float64}
_dtype = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces NaN or infinite values."""


def get_dtype():
    return _dtype


def set_precision(name: str) -> None:
    global _dtype
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    _dtype = PRECISIONS[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors."""
    global _dtype
    old = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = old


class Tensor:
    """An ndarray plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        """Add ``g`` to the gradient.  ``owned`` promises ``g`` is a fresh array
        nobody else holds, so it can be adopted without a copy."""
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor (a scalar unless ``seed`` is given)."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        order = _topological_order(self)
        for node in order:
            if node is not self and node._backward is not None:
                node.grad = None
        self.accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
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


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None],
            check_finite: bool | None = None) -> Tensor:
    """Wrap the output of a custom operation so it takes part in backprop.

    ``backward`` receives the output gradient and must call
    ``parent.accumulate`` for every parent that requires a gradient.
    Finiteness is checked for small outputs by default; large intermediate
    arrays skip the scan since NaN/Inf propagate to the (checked) loss.
    """
    if check_finite is None:
        check_finite = np.size(data) <= 4096
    if check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in forward output of shape {np.shape(data)}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return from_op(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return from_op(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return from_op(a.data * c, (a,), lambda g: a.accumulate(g * c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # shared right operand: one flat product instead of a batch then a sum
                n = a.shape[-1]
                b.accumulate(a.data.reshape(-1, n).T @ g.reshape(-1, g.shape[-1]), owned=True)
            else:
                b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return from_op(a.data @ b.data, (a, b), backward)


def transpose_last(a: Tensor) -> Tensor:
    # materialized: strided views make later batched matmuls several times slower
    return from_op(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)), (a,),
                   lambda g: a.accumulate(np.swapaxes(g, -1, -2)))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return from_op(a.data.reshape(shape), (a,), lambda g: a.accumulate(g.reshape(a.shape)))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    def backward(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.shape))
        else:
            a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return from_op(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return from_op(np.asarray(a.data.mean()), (a,), lambda g: a.accumulate(np.broadcast_to(g / n, a.shape)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at 0
    return from_op(a.data * mask, (a,), lambda g: a.accumulate(g * mask, owned=True))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return from_op(y, (a,), lambda g: a.accumulate(g * (1.0 - y * y)))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``a`` is (rows, D); returns ``a[index]`` with shape index.shape + (D,)."""
    index = np.asarray(index)

    def backward(g):
        flat = index.reshape(-1)
        # scatter-add as a sparse product; np.add.at is far slower here
        scatter = sparse.csr_matrix((np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
                                    shape=(a.shape[0], flat.size))
        a.accumulate(np.asarray(scatter @ g.reshape(-1, a.shape[-1])), owned=True)

    return from_op(np.take(a.data, index, axis=0), (a,), backward)


def future_windows(z: Tensor, width: int) -> Tensor:
    """(B, T, D) -> (B, T - width, width, D); row t holds z[t+1 .. t+width]."""
    B, T, D = z.shape
    n = T - width
    if n < 1:
        raise ValueError(f"sequence of length {T} too short for a window of {width}")
    idx = np.arange(n)[:, None] + np.arange(1, width + 1)[None, :]
    out = np.ascontiguousarray(z.data[:, idx, :])

    def backward(g):
        full = np.zeros_like(z.data)
        for m in range(width):
            full[:, m + 1:m + 1 + n] += g[:, :, m]
        z.accumulate(full, owned=True)

    return from_op(out, (z,), backward)


# ---------------------------------------------------------------------------
# log-space helpers


def logsumexp(values, axis=None, allow_impossible: bool = True):
    """log(sum(exp(values))) with max subtraction.

    Entries equal to ``IMPOSSIBLE`` contribute zero probability; a slice made
    only of impossible entries yields ``IMPOSSIBLE``.
    """
    v = np.asarray(values, dtype=float if not isinstance(values, np.ndarray) else None)
    if v.size == 0:
        raise ValueError("logsumexp of an empty input")
    mx = np.max(v, axis=axis, keepdims=True)
    if not allow_impossible and np.any(np.isneginf(mx)):
        raise ValueError("all entries are impossible")
    safe = np.where(np.isneginf(mx), 0.0, mx)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - safe), axis=axis, keepdims=True)) + safe
    if axis is None:
        return out.reshape(()).item() if v.ndim else float(out)
    return np.squeeze(out, axis=axis)


def log_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise log(exp(a) + exp(b)); exact when either side is ``IMPOSSIBLE``.

    Faster than ``np.logaddexp`` on float32 inputs with many impossible entries.
    """
    mx = np.maximum(a, b)
    with np.errstate(invalid="ignore"):
        out = mx + np.log1p(np.exp(-np.abs(a - b)))
    return np.where(mx == IMPOSSIBLE, mx, out)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x - np.expand_dims(logsumexp(x, axis=axis), axis)


# ---------------------------------------------------------------------------
# encoder primitives


def conv_output_length(time: int, width: int, stride: int) -> int:
    if time < width:
        raise ValueError(f"input length {time} shorter than kernel width {width}")
    return (time - width) // stride + 1


def conv1d_strided(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """Valid 1-D convolution (cross-correlation) without padding.

    x: (B, C_in, T) or (C_in, T); kernel: (C_out, C_in, W).
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, C, T = xd.shape
    O, C2, W = kernel.shape
    if C != C2:
        raise ValueError(f"kernel expects {C2} input channels, got {C}")
    n = conv_output_length(T, W, stride)
    win = np.lib.stride_tricks.sliding_window_view(xd, W, axis=2)[:, :, ::stride][:, :, :n]  # B,C,n,W
    out = np.einsum("bcnw,ocw->bon", win, kernel.data, optimize=True)
    if squeeze:
        out = out[0]

    def backward(g):
        gd = g[None] if squeeze else g
        if kernel.requires_grad:
            kernel.accumulate(np.einsum("bon,bcnw->ocw", gd, win, optimize=True), owned=True)
        if x.requires_grad:
            gx = np.zeros_like(xd)
            span = stride * (n - 1) + 1
            for w in range(W):
                # contribution of tap w lands on samples w, w+stride, ...
                gx[:, :, w:w + span:stride] += np.einsum("bon,oc->bcn", gd, kernel.data[:, :, w], optimize=True)
            x.accumulate(gx[0] if squeeze else gx, owned=True)

    return from_op(out, (x, kernel), backward)


CHANNEL_NORM_EPS = 1e-8


def channel_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = CHANNEL_NORM_EPS) -> Tensor:
    """Normalize the channel vector of every time step, then apply gain/bias.

    x: (B, C, T) or (C, T); gain, bias: (C,).
    """
    axis = -2
    C = x.shape[axis]
    if C < 2:
        raise ValueError("channel_norm needs at least two channels")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = gain.data[:, None]
    out = xhat * g_ + bias.data[:, None]

    def backward(g):
        red = tuple(i for i in range(g.ndim) if i != g.ndim - 2)
        if gain.requires_grad:
            gain.accumulate((g * xhat).sum(axis=red))
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=red))
        if x.requires_grad:
            gh = g * g_
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
            x.accumulate(gx, owned=True)

    return from_op(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# recurrent sweep


def gru(x: Tensor, w_in: Tensor, w_hid: Tensor, bias: Tensor) -> Tensor:
    """Gated recurrent unit run over a whole (B, T, D) sequence from a zero state.

    Gate blocks in the 3H columns are ordered (update, reset, candidate):
        u = s(x W_u + h U_u + b_u), r = s(x W_r + h U_r + b_r)
        n = tanh(x W_n + (r * h) U_n + b_n),  h' = (1 - u) h + u n
    Returns the (B, T, H) hidden states.
    """
    xd = x.data
    B, T, _ = xd.shape
    H = w_hid.shape[0]
    Wd, Ud = w_in.data, w_hid.data
    U_ur, U_n = Ud[:, :2 * H], Ud[:, 2 * H:]
    # time-major buffers keep every per-step slice contiguous
    gx = np.ascontiguousarray((xd @ Wd + bias.data).transpose(1, 0, 2))
    hs = np.zeros((T + 1, B, H), dtype=xd.dtype)
    ur = np.empty((T, B, 2 * H), dtype=xd.dtype)
    ns = np.empty((T, B, H), dtype=xd.dtype)
    h = hs[0]
    for t in range(T):
        ur[t] = sigmoid_array(gx[t, :, :2 * H] + h @ U_ur)
        u, r = ur[t, :, :H], ur[t, :, H:]
        ns[t] = np.tanh(gx[t, :, 2 * H:] + (r * h) @ U_n)
        h = hs[t + 1] = h + u * (ns[t] - h)
    out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))

    def backward(g):
        g = np.ascontiguousarray(np.transpose(g, (1, 0, 2)))
        hp = hs[:-1]
        u, r = ur[..., :H], ur[..., H:]
        # factors that do not depend on the incoming gradient
        a_n = u * (1.0 - ns * ns)
        a_u = (ns - hp) * u * (1.0 - u)
        a_r = hp * r * (1.0 - r)
        keep = 1.0 - u
        dgx = np.empty_like(gx)
        dh = np.zeros((B, H), dtype=xd.dtype)
        U_nT, U_urT = np.ascontiguousarray(U_n.T), np.ascontiguousarray(U_ur.T)
        for t in range(T - 1, -1, -1):
            dh = dh + g[t]
            dn_pre = dh * a_n[t]
            d_rh = dn_pre @ U_nT
            d_ur = dgx[t, :, :2 * H]
            np.multiply(dh, a_u[t], out=d_ur[:, :H])
            np.multiply(d_rh, a_r[t], out=d_ur[:, H:])
            dgx[t, :, 2 * H:] = dn_pre
            dh = dh * keep[t] + d_rh * r[t] + d_ur @ U_urT
        flat = dgx.reshape(T * B, 3 * H)
        if w_in.requires_grad:
            xt = xd.transpose(1, 0, 2).reshape(T * B, -1)
            w_in.accumulate(xt.T @ flat, owned=True)
        if w_hid.requires_grad:
            dU_ur = hp.reshape(T * B, H).T @ flat[:, :2 * H]
            dU_n = (r * hp).reshape(T * B, H).T @ flat[:, 2 * H:]
            w_hid.accumulate(np.concatenate([dU_ur, dU_n], axis=1), owned=True)
        if bias.requires_grad:
            bias.accumulate(flat.sum(axis=0))
        if x.requires_grad:
            x.accumulate(np.ascontiguousarray((dgx @ Wd.T).transpose(1, 0, 2)), owned=True)

    return from_op(out, (x, w_in, w_hid, bias), backward)


# ---------------------------------------------------------------------------
# gradient checking


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, eps: float) -> np.ndarray:
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def check_gradients(function: Callable[..., Tensor], point: Sequence[np.ndarray], epsilon: float = 1e-5,
                    floor: float = 1e-7) -> float:
    """Worst component-wise relative error between backprop and central differences.

    ``function`` takes one Tensor per array in ``point`` and returns a scalar
    Tensor.  Relative error is |a - n| / max(|a|, |n|, floor * max(1, max|a|)),
    so components that are zero in both estimates do not blow up the ratio.
    """
    arrays = [np.array(p, dtype=_dtype, copy=True) for p in point]
    tensors = [parameter(a) for a in arrays]
    out = function(*tensors)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("function value is not finite")
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value() -> float:
        v = function(*[Tensor(a) for a in arrays]).data
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("function value is not finite")
        return float(v)

    scale_ = max(1.0, max(float(np.max(np.abs(a))) if a.size else 0.0 for a in analytic))
    worst = 0.0
    for arr, ga in zip(arrays, analytic):
        gn = numerical_gradient(value, arr, epsilon)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), floor * scale_)
        if ga.size:
            worst = max(worst, float(np.max(np.abs(ga - gn) / denom)))
    return worst
