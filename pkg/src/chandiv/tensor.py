"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float64 by default for verification,
float32 for training) and record the operations that produced them. Calling
``backward()`` on a scalar result replays the recorded graph in reverse
topological order and accumulates gradients additively into every
``requires_grad`` leaf. Callers are responsible for zeroing gradients
between optimization steps.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = contextvars.ContextVar("chandiv_grad_enabled", default=True)
_FINITE_CHECKS = contextvars.ContextVar("chandiv_finite_checks", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle the per-operation finiteness validation.

    The hot training loop disables it and checks the loss scalar instead.
    """
    token = _FINITE_CHECKS.set(enabled)
    try:
        yield
    finally:
        _FINITE_CHECKS.reset(token)


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional array plus an optional gradient slot.

    Leaves are created directly; operation results carry references to their
    parents and a local backward rule. A leaf never appears as an operation
    output.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward_fn=None):
        arr = _as_float_array(data, dtype)
        if _FINITE_CHECKS.get() and not np.all(np.isfinite(arr)):
            raise ContractError("tensor holds non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires_grad leaf.

        ``self`` must be a scalar produced through recorded operations.
        """
        if self.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}")
        order = self._topo_order()
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def _topo_order(self) -> list:
        # Iterative DFS; recursion would overflow on long training graphs.
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording the graph only when gradients may flow."""
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True,
                      _parents=tuple(parents), _backward_fn=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(t: Tensor, grad: np.ndarray, owned: bool = False) -> None:
    """Add `grad` into t.grad. ``owned`` marks arrays this op freshly
    allocated, which may be adopted without a defensive copy."""
    if not t.requires_grad:
        return
    grad = _unbroadcast(grad, t.data.shape)
    if t.grad is None:
        # Without ownership, copy: the same upstream array may be routed to
        # several parents, each of which accumulates in place later.
        t.grad = grad if owned else np.array(grad)
    else:
        t.grad += grad


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * out_data / b.data)

    return _result(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def backward(g):
        _accumulate(a, np.where(a.data > 0, g, 0.0), owned=True)

    return _result(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # exp of -|x| only, so large magnitudes cannot overflow
    z = np.exp(-np.abs(a.data))
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _result(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _result(out_data, (a,), backward)


# -- reductions and shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _result(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.data.shape[i] for i in axes]))

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.data.shape))

    return _result(out_data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old_shape))

    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _result(out_data, tuple(tensors), backward)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; stacked inputs (rank > 2) multiply over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        _accumulate(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _accumulate(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _result(out_data, (a, b), backward)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    p = tuple(int(x) for x in v)
    if len(p) != 2:
        raise ShapeError(f"expected an int or a pair, got {v!r}")
    return p


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            ho: int, wo: int) -> np.ndarray:
    """Gather padded input into a (C*kh*kw, N*ho*wo) patch matrix.

    The (C, kh, kw, N, ho, wo) buffer order keeps the inner copies nearly
    contiguous, which is several times faster than a strided one-shot copy.
    """
    n, c = xp.shape[0], xp.shape[1]
    buf = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, :, dy:dy + sh * ho:sh, dx:dx + sw * wo:sw]
            buf[:, dy, dx] = patch.transpose(1, 0, 2, 3)
    return buf.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, sh: int,
            sw: int, ph: int, pw: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add patch gradients back to input layout (inverse of _im2col)."""
    n, c, h, w = x_shape
    buf = cols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for dy in range(kh):
        for dx in range(kw):
            # += because neighbouring windows overlap when stride < kernel
            xp[:, :, dy:dy + sh * ho:sh, dx:dx + sw * wo:sw] += \
                buf[:, dy, dx].transpose(1, 0, 2, 3)
    if ph or pw:
        return xp[:, :, ph:ph + h, pw:pw + w]
    return xp


def conv2d(x, kernel, stride=1, pad=0) -> Tensor:
    """2-D cross-correlation (no kernel flip) over channels-first input.

    Args:
        x: input of shape (Cin, H, W) or (N, Cin, H, W).
        kernel: filters of shape (Cout, Cin, kh, kw).
        stride, pad: int or (vertical, horizontal) pair.

    Returns:
        (Cout, H', W') or (N, Cout, H', W') with
        H' = (H + 2*pad_h - kh) // stride_h + 1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects (N,Cin,H,W) input and (Cout,Cin,kh,kw) kernel, "
            f"got {x.shape} and {kernel.shape}")
    n, cin, h, w = xd.shape
    cout, ck, kh, kw = kernel.shape
    if ck != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d output extent non-positive ({ho}x{wo}) for input "
            f"{x.shape}, kernel {kernel.shape}, stride {(sh, sw)}, pad {(ph, pw)}")

    xpad = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cols = _im2col(xpad, kh, kw, sh, sw, ho, wo)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.ascontiguousarray(
        (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        if single:
            g = g[None]
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        if kernel.requires_grad:
            _accumulate(kernel, (gt @ cols.T).reshape(kernel.shape), owned=True)
        if x.requires_grad:
            dcols = wmat.T @ gt
            dx = _col2im(dcols, (n, cin, h, w), kh, kw, sh, sw, ph, pw, ho, wo)
            _accumulate(x, dx[0] if single else dx, owned=True)

    return _result(out[0] if single else out, (x, kernel), backward)


# -- normalizations ------------------------------------------------------------

def softmax(a, axis: int) -> Tensor:
    """Exp-normalize along `axis` with per-slice max subtraction.

    The subtraction is load-bearing: inputs scale with feature-map energy and
    overflow a naive exp well before 1e4.
    """
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {a.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - inner) * out_data)

    return _result(out_data, (a,), backward)


def global_avg_pool(x) -> Tensor:
    """Spatial mean per channel: (C,H,W) -> (C,1), (N,C,H,W) -> (N,C)."""
    x = as_tensor(x)
    if x.ndim == 3:
        c = x.shape[0]
        return reshape(tmean(x, axis=(1, 2)), (c, 1))
    if x.ndim == 4:
        return tmean(x, axis=(2, 3))
    raise ShapeError(f"global_avg_pool expects rank 3 or 4, got {x.shape}")


def batch_norm2d(x, gamma, beta, eps: float = 1e-5):
    """Batch normalization over (N, H, W) per channel, as one fused node.

    Returns ``(out, batch_mean, batch_var)`` where the statistics are plain
    arrays (biased variance) for the caller's running-average update. Fusing
    forward and backward avoids ~8 intermediate full-size arrays per call.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects (N,C,H,W), got {x.shape}")
    axes = (0, 2, 3)
    count = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mean = x.data.mean(axis=axes)
    # E[x^2] - E[x]^2 via einsum: one reduction pass, no squared temporary
    var = np.einsum("nchw,nchw->c", x.data, x.data) / count - mean * mean
    np.maximum(var, 0.0, out=var)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = x.data - mean[None, :, None, None]
    xhat *= inv_std[None, :, None, None]
    out_data = xhat * gamma.data[None, :, None, None]
    out_data += beta.data[None, :, None, None]

    def backward(g):
        _accumulate(beta, g.sum(axis=axes))
        _accumulate(gamma, np.einsum("nchw,nchw->c", g, xhat))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            m1 = dxhat.mean(axis=axes)
            m2 = np.einsum("nchw,nchw->c", dxhat, xhat) / count
            dxhat -= m1[None, :, None, None]
            dxhat -= xhat * m2[None, :, None, None]
            dxhat *= inv_std[None, :, None, None]
            _accumulate(x, dxhat, owned=True)

    return _result(out_data, (x, gamma, beta), backward), mean, var


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy between (N, K) logits and integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"expected (N,K) logits with N labels, got {logits.shape} "
            f"and {labels.shape}")
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        dz = np.exp(logp)
        dz[np.arange(n), labels] -= 1.0
        _accumulate(logits, dz * (float(g) / n))

    return _result(loss, (logits,), backward)


# -- verification harness --------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    Runs in double precision regardless of the input dtype. Returns
    max over components of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ContractError("grad_check needs eps > 0")
    x0 = np.array(x.data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got {out.shape}")
    out.backward()
    analytic = (np.zeros_like(x0) if leaf.grad is None else leaf.grad).ravel()

    numeric = np.empty_like(analytic)
    flat = x0.ravel()
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(Tensor(x0.copy())).item()
            flat[i] = orig - eps
            lo = f(Tensor(x0.copy())).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
