"""Define-by-run reverse-mode autodiff over dense numpy arrays.

Every numeric operation used by the model, losses and probes lives here.
The graph is rebuilt on every forward pass and garbage-collected once the
loss tensor is dropped; `backward` walks it exactly once in reverse
topological order. All kernels are plain single-threaded numpy calls, so
results are bitwise reproducible run to run.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

# Config-visible numeric constants (see also TrainConfig.precision).
L2_NORM_EPS = 1e-12
BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1

DTYPES = {32: np.float32, 64: np.float64}


class Tensor:
    """Dense n-d value recorded in a differentiation graph.

    `data` is the flat row-major numpy buffer (viewed with its shape),
    `grad` is populated by `backward` only for tensors with
    `requires_grad=True`; everything else stays grad-free.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None, _op="leaf"):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self):
        return tensor_sum(self)

    def detach(self):
        return detach(self)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, dtype=None):
    """Leaf tensor; copies/casts only when `dtype` demands it."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _result(data, parents, backward_fn, op):
    # Outputs that cannot carry gradient drop their parent links, which
    # prunes constant subgraphs (and is what makes detach exact).
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward_fn=backward_fn, _op=op)
    return Tensor(data, requires_grad=False, _op=op)


def _accumulate(grads, t, g):
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] += g
    else:
        grads[key] = np.array(g, dtype=t.data.dtype, copy=True)


def _as_pair(a, b, op):
    """Coerce `b` to a same-shape tensor or a scalar of `a`'s dtype."""
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")
        if a.data.dtype != b.data.dtype:
            raise TypeError(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} differ")
        return b, False
    return a.data.dtype.type(b), True


class Graph:
    """Ordered record of the ops reachable from a root, parents first.

    Recording order is a valid forward order; one backward sweep over
    `reversed(nodes)` visits each node exactly once.
    """

    def __init__(self, root):
        self.nodes = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))


def backward(loss):
    """Populate `grad` on every requires-grad tensor reachable from `loss`.

    Repeated calls without clearing grads accumulate.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    grads = {}
    grads[id(loss)] = np.ones_like(loss.data)
    graph = Graph(loss)
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node._backward_fn is None:
            continue
        node._backward_fn(g, grads)
    for node in graph.nodes:
        g = grads.get(id(node))
        if g is None:
            continue
        if node.grad is None:
            node.grad = g
        else:
            node.grad = node.grad + g


# -- elementwise ------------------------------------------------------


def add(a, b):
    b, scalar = _as_pair(a, b, "add")
    if scalar:
        def bw(g, grads):
            _accumulate(grads, a, g)
        return _result(a.data + b, (a,), bw, "add")

    def bw(g, grads):
        _accumulate(grads, a, g)
        _accumulate(grads, b, g)
    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    b, scalar = _as_pair(a, b, "sub")
    if scalar:
        def bw(g, grads):
            _accumulate(grads, a, g)
        return _result(a.data - b, (a,), bw, "sub")

    def bw(g, grads):
        _accumulate(grads, a, g)
        _accumulate(grads, b, -g)
    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    """Elementwise product, or scale-by-constant when `b` is a scalar."""
    b, scalar = _as_pair(a, b, "mul")
    if scalar:
        def bw(g, grads):
            _accumulate(grads, a, g * b)
        return _result(a.data * b, (a,), bw, "scale")

    def bw(g, grads):
        _accumulate(grads, a, g * b.data)
        _accumulate(grads, b, g * a.data)
    return _result(a.data * b.data, (a, b), bw, "mul")


def maximum(a, b):
    """Elementwise max; on exact ties the gradient goes to `a` (the first
    argument), so the two argument grads always sum to the incoming one."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"maximum: shapes {a.data.shape} and {b.data.shape} differ")
    first = a.data >= b.data

    def bw(g, grads):
        _accumulate(grads, a, np.where(first, g, 0))
        _accumulate(grads, b, np.where(first, 0, g))
    return _result(np.where(first, a.data, b.data), (a, b), bw, "maximum")


def relu(a):
    mask = a.data > 0

    def bw(g, grads):
        _accumulate(grads, a, np.where(mask, g, 0))
    return _result(np.where(mask, a.data, 0), (a,), bw, "relu")


def detach(a):
    """Value-identical leaf: shares `a`'s buffer, blocks all gradient flow."""
    return Tensor(a.data, requires_grad=False, _op="detach")


# -- linear algebra ---------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} incompatible")

    def bw(g, grads):
        _accumulate(grads, a, g @ b.data.T)
        _accumulate(grads, b, a.data.T @ g)
    return _result(a.data @ b.data, (a, b), bw, "matmul")


def add_bias(x, b):
    """Add a length-D bias row-wise to a [B, D] tensor."""
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_bias: shapes {x.data.shape} and {b.data.shape} incompatible")

    def bw(g, grads):
        _accumulate(grads, x, g)
        _accumulate(grads, b, g.sum(axis=0))
    return _result(x.data + b.data, (x, b), bw, "add_bias")


def tensor_sum(a):
    """Sum of all elements, as a scalar tensor."""
    def bw(g, grads):
        _accumulate(grads, a, np.broadcast_to(g, a.data.shape))
    return _result(np.sum(a.data, dtype=a.data.dtype), (a,), bw, "sum")


def l2_normalize(x, eps=L2_NORM_EPS):
    """Divide each row of a [B, D] tensor by max(||row||, eps).

    Rows clamped at the floor get a zero gradient (the safe-norm
    subgradient choice). The function is not differentiable there, and
    the one-sided slope 1/eps would inject enormous updates whenever a
    row collapses to zero — e.g. a prediction row whose hidden units all
    died at the ReLU, which is exactly the zero bias at initialization.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize: expected [B, D], got shape {x.data.shape}")
    eps = x.data.dtype.type(eps)
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = x.data / denom
    active = norms >= eps  # rows where the norm (first max argument) won

    def bw(g, grads):
        rowdot = np.sum(g * y, axis=1, keepdims=True)
        zero = x.data.dtype.type(0)
        _accumulate(grads, x, np.where(active, (g - y * rowdot) / denom, zero))
    return _result(y, (x,), bw, "l2_normalize")


# -- normalization ----------------------------------------------------


def batchnorm(x, gamma, beta, running_mean, running_var, mode,
              momentum=BATCHNORM_MOMENTUM, eps=BATCHNORM_EPS):
    """Batch normalization over a [B, D] or [B, C, H, W] tensor.

    Train mode normalizes with biased batch statistics and updates the
    running buffers in place (unbiased variance, momentum as given); eval
    mode reads the running buffers. `running_mean`/`running_var` are plain
    numpy arrays, not graph tensors.
    """
    nd = x.data.ndim
    if nd == 2:
        axes, pshape = (0,), (1, -1)
    elif nd == 4:
        axes, pshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batchnorm: expected 2-d or 4-d input, got shape {x.data.shape}")
    nfeat = x.data.shape[1]
    if gamma.data.shape != (nfeat,) or beta.data.shape != (nfeat,):
        raise ShapeError(
            f"batchnorm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape}"
            f" do not match {nfeat} features")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm: unknown mode {mode!r}")

    eps = x.data.dtype.type(eps)
    gview = gamma.data.reshape(pshape)
    bview = beta.data.reshape(pshape)

    if mode == "train":
        if x.data.shape[0] < 2:
            raise ShapeError(
                f"batchnorm: train mode needs batch size >= 2, got {x.data.shape[0]}"
                " (batch variance undefined)")
        n = 1
        for ax in axes:
            n *= x.data.shape[ax]
        mu = np.mean(x.data, axis=axes, keepdims=True)
        var = np.mean((x.data - mu) ** 2, axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.reshape(-1).astype(running_mean.dtype)
        unbiased = var.reshape(-1) * (n / (n - 1))
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased.astype(running_var.dtype)

        def bw(g, grads):
            _accumulate(grads, gamma, np.sum(g * xhat, axis=axes))
            _accumulate(grads, beta, np.sum(g, axis=axes))
            dxhat = g * gview
            dx = (dxhat - np.mean(dxhat, axis=axes, keepdims=True)
                  - xhat * np.mean(dxhat * xhat, axis=axes, keepdims=True)) * inv_std
            _accumulate(grads, x, dx)
    else:
        inv_std = 1.0 / np.sqrt(running_var.reshape(pshape).astype(x.data.dtype) + eps)
        xhat = (x.data - running_mean.reshape(pshape).astype(x.data.dtype)) * inv_std

        def bw(g, grads):
            _accumulate(grads, gamma, np.sum(g * xhat, axis=axes))
            _accumulate(grads, beta, np.sum(g, axis=axes))
            _accumulate(grads, x, g * gview * inv_std)

    return _result(gview * xhat + bview, (x, gamma, beta), bw, "batchnorm")


# -- convolution ------------------------------------------------------


def conv2d(x, k, stride=1, padding=0):
    """Cross-correlate [B, C, H, W] with kernels [K, C, kh, kw].

    Forward runs as an im2col matmul; backward scatters the column grads
    back through the same window layout.
    """
    if x.data.ndim != 4 or k.data.ndim != 4 or x.data.shape[1] != k.data.shape[1]:
        raise ShapeError(f"conv2d: shapes {x.data.shape} and {k.data.shape} incompatible")
    bsz, cin, h, w = x.data.shape
    kout, _, kh, kw = k.data.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(
            f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    hout = (hp - kh) // stride + 1
    wout = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B, C, hout, wout, kh, kw] -> [B, hout*wout, C*kh*kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz, hout * wout, -1)
    kmat = k.data.reshape(kout, -1)
    out = (cols @ kmat.T).transpose(0, 2, 1).reshape(bsz, kout, hout, wout)

    def bw(g, grads):
        gmat = g.reshape(bsz, kout, hout * wout).transpose(0, 2, 1)
        if k.requires_grad:
            dk = np.einsum("bnk,bnc->kc", gmat, cols).reshape(k.data.shape)
            _accumulate(grads, k, dk)
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(bsz, hout, wout, cin, kh, kw)
            dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # [B, C, kh, kw, hout, wout]
            dxp = np.zeros((bsz, cin, hp, wp), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * (hout - 1) + 1:stride,
                        j:j + stride * (wout - 1) + 1:stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(grads, x, dxp)
    return _result(out, (x, k), bw, "conv2d")


def global_avg_pool(x):
    """Mean over the spatial dims of a [B, C, H, W] tensor -> [B, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got shape {x.data.shape}")
    _, _, h, w = x.data.shape
    scale = x.data.dtype.type(1.0 / (h * w))

    def bw(g, grads):
        _accumulate(grads, x, np.broadcast_to((g * scale)[:, :, None, None], x.data.shape))
    return _result(np.mean(x.data, axis=(2, 3)), (x,), bw, "global_avg_pool")


# -- classification head ----------------------------------------------


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of [B, K] logits against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected [B, K], got {logits.data.shape}")
    labels = np.asarray(labels)
    bsz = logits.data.shape[0]
    if labels.shape != (bsz,):
        raise ShapeError(f"softmax_cross_entropy: {bsz} rows but {labels.shape} labels")
    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    expz = np.exp(z)
    sumexp = np.sum(expz, axis=1, keepdims=True)
    logp = z - np.log(sumexp)
    loss = -np.mean(logp[np.arange(bsz), labels], dtype=logits.data.dtype)

    def bw(g, grads):
        dlogits = expz / sumexp
        dlogits[np.arange(bsz), labels] -= 1.0
        _accumulate(grads, logits, dlogits * (g / bsz))
    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, "softmax_cross_entropy")
