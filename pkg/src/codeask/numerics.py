"""Dense differentiable primitives: a tiny reverse-mode tape over numpy
arrays, the handful of ops the model needs, and a central finite-difference
gradient oracle.

Everything runs in float64.  Forward values live in ``Var.value``; calling
``backward`` on a scalar Var accumulates gradients into ``Parameter.grad``
for every parameter leaf reachable from it.
"""

from __future__ import annotations

import struct

import numpy as np


def as_tensor(data, dtype=np.float64):
    """Coerce to a dense array, rejecting NaN/Inf at the boundary."""
    arr = np.asarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values in tensor")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    # PCG64 is stable across platforms for a fixed seed.
    return np.random.Generator(np.random.PCG64(seed))


class Parameter:
    """A named trainable array with an accumulated gradient."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


class Var:
    """A node in the computation graph.

    ``grads`` is a tuple of (parent, fn) pairs where ``fn`` maps the output
    gradient to the parent's gradient contribution.  Parents may be Vars or
    Parameters; Parameter gradients accumulate in place.
    """

    __slots__ = ("value", "grad", "grads")

    def __init__(self, value, grads=()):
        self.value = value
        self.grad = None
        self.grads = grads


def const(x) -> Var:
    return Var(np.asarray(x, dtype=np.float64))


def pv(p: Parameter) -> Var:
    """Leaf Var view of a Parameter."""
    return Var(p.value, ((p, lambda g: g),))


def backward(root: Var, seed=1.0):
    """Reverse-mode sweep from a scalar root."""
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.grads:
            if isinstance(parent, Var) and id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.asarray(seed, dtype=np.float64)
    for node in reversed(topo):
        if node.grad is None:
            continue
        for parent, fn in node.grads:
            g = fn(node.grad)
            if isinstance(parent, Parameter):
                parent.grad += g
            else:
                parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Var(a.value + b.value, ((a, lambda g: g), (b, lambda g: g)))


def mul(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return Var(av * bv, ((a, lambda g: g * bv), (b, lambda g: g * av)))


def scale(x: Var, s: Var) -> Var:
    """Array times scalar Var."""
    xv, sv = x.value, s.value
    return Var(xv * sv, ((x, lambda g: g * sv), (s, lambda g: np.sum(g * xv))))


def one_minus(s: Var) -> Var:
    return Var(1.0 - s.value, ((s, lambda g: -g),))


def sigmoid(x: Var) -> Var:
    y = 1.0 / (1.0 + np.exp(-x.value))
    return Var(y, ((x, lambda g: g * y * (1.0 - y)),))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return Var(y, ((x, lambda g: g * (1.0 - y * y)),))


def vsum(x: Var) -> Var:
    shape = x.value.shape
    return Var(np.asarray(np.sum(x.value)), ((x, lambda g: np.broadcast_to(g, shape).copy()),))


def minimum(a: Var, b: Var) -> Var:
    # On ties the gradient routes to `a`.
    take_a = a.value <= b.value
    return Var(
        np.where(take_a, a.value, b.value),
        ((a, lambda g: g * take_a), (b, lambda g: g * ~take_a)),
    )


def neg_log_eps(x: Var, eps: float = 1e-12) -> Var:
    """-log(x + eps) on a scalar."""
    xv = x.value
    return Var(np.asarray(-np.log(xv + eps)), ((x, lambda g: -g / (xv + eps)),))


# ---------------------------------------------------------------------------
# linear algebra ops


def matvec(W: Var, x: Var) -> Var:
    Wv, xv = W.value, x.value
    if Wv.ndim != 2 or xv.ndim != 1 or Wv.shape[1] != xv.shape[0]:
        raise ValueError(f"matvec shape mismatch: {Wv.shape} @ {xv.shape}")
    return Var(Wv @ xv, ((W, lambda g: np.outer(g, xv)), (x, lambda g: Wv.T @ g)))


def affine(x: Var, W: Var, b: Var) -> Var:
    """y = Wx + b."""
    Wv, xv, bv = W.value, x.value, b.value
    if Wv.ndim != 2 or Wv.shape[1] != xv.shape[0] or Wv.shape[0] != bv.shape[0]:
        raise ValueError(
            f"affine shape mismatch: W{Wv.shape}, x{xv.shape}, b{bv.shape}"
        )
    return add(matvec(W, x), b)


def linear_rows(H: Var, W: Var) -> Var:
    """Y = H @ W.T for a T-row matrix of annotations."""
    Hv, Wv = H.value, W.value
    return Var(Hv @ Wv.T, ((H, lambda g: g @ Wv), (W, lambda g: g.T @ Hv)))


def add_rowvec(M: Var, r: Var) -> Var:
    return Var(M.value + r.value[None, :], ((M, lambda g: g), (r, lambda g: g.sum(axis=0))))


def outer_colvec(c: Var, w: Var) -> Var:
    """Y[i, j] = c[i] * w[j]."""
    cv, wv = c.value, w.value
    return Var(
        cv[:, None] * wv[None, :],
        ((c, lambda g: g @ wv), (w, lambda g: g.T @ cv)),
    )


def mat_t_vec(H: Var, a: Var) -> Var:
    """y = H.T @ a (attention-weighted sum of rows)."""
    Hv, av = H.value, a.value
    return Var(Hv.T @ av, ((H, lambda g: np.outer(av, g)), (a, lambda g: Hv @ g)))


def dot(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return Var(np.asarray(av @ bv), ((a, lambda g: g * bv), (b, lambda g: g * av)))


def concat(parts) -> Var:
    parts = list(parts)
    values = [p.value for p in parts]
    offsets = np.cumsum([0] + [v.shape[0] for v in values])
    grads = tuple(
        (p, (lambda lo, hi: lambda g: g[lo:hi])(offsets[i], offsets[i + 1]))
        for i, p in enumerate(parts)
    )
    return Var(np.concatenate(values), grads)


def take(x: Var, lo: int, hi: int) -> Var:
    n = x.value.shape[0]

    def bwd(g):
        out = np.zeros(n)
        out[lo:hi] = g
        return out

    return Var(x.value[lo:hi], ((x, bwd),))


def stack_rows(rows) -> Var:
    rows = list(rows)
    grads = tuple((r, (lambda i: lambda g: g[i])(i)) for i, r in enumerate(rows))
    return Var(np.stack([r.value for r in rows]), grads)


def gather_row(table: Var, idx: int) -> Var:
    tv = table.value
    if not 0 <= idx < tv.shape[0]:
        raise IndexError(f"embedding id {idx} out of range [0, {tv.shape[0]})")

    def bwd(g):
        out = np.zeros_like(tv)
        out[idx] = g
        return out

    return Var(tv[idx].copy(), ((table, bwd),))


def gather_scalar(x: Var, idx: int) -> Var:
    n = x.value.shape[0]
    if not 0 <= idx < n:
        raise IndexError(f"index {idx} out of range [0, {n})")

    def bwd(g):
        out = np.zeros(n)
        out[idx] = g
        return out

    return Var(np.asarray(x.value[idx]), ((x, bwd),))


def pad_to(x: Var, size: int) -> Var:
    n = x.value.shape[0]
    out = np.zeros(size)
    out[:n] = x.value
    return Var(out, ((x, lambda g: g[:n]),))


def scatter_sum(a: Var, ids, size: int) -> Var:
    """y[ids[i]] += a[i]; the copy-distribution scatter."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(size)
    np.add.at(out, ids, a.value)
    return Var(out, ((a, lambda g: g[ids]),))


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted-dropout multiplier; identity when rate == 0."""
    if rate <= 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def apply_mask(x: Var, mask: np.ndarray) -> Var:
    return Var(x.value * mask, ((x, lambda g: g * mask),))


# ---------------------------------------------------------------------------
# softmax


def softmax_masked_np(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("softmax_masked: all positions masked out")
    shifted = logits - np.max(logits[mask])
    e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    return e / e.sum()


def softmax_masked(logits: Var, mask: np.ndarray) -> Var:
    p = softmax_masked_np(logits.value, mask)

    def bwd(g):
        return p * (g - np.sum(g * p))

    return Var(p, ((logits, bwd),))


def softmax(logits: Var) -> Var:
    return softmax_masked(logits, np.ones(logits.value.shape[0], dtype=bool))


# ---------------------------------------------------------------------------
# LSTM cell


class LstmParams:
    """Gate weights for one cell: input size n, hidden size h.

    Wx: (4h, n), Wh: (4h, h), b: (4h,) in gate order i, f, g, o.
    """

    def __init__(self, name: str, n: int, h: int, rng=None, init_scale=0.1):
        self.hidden = h
        if rng is None:
            wx = np.zeros((4 * h, n))
            wh = np.zeros((4 * h, h))
        else:
            wx = rng.uniform(-init_scale, init_scale, (4 * h, n))
            wh = rng.uniform(-init_scale, init_scale, (4 * h, h))
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0  # forget-gate bias
        self.Wx = Parameter(f"{name}.Wx", wx)
        self.Wh = Parameter(f"{name}.Wh", wh)
        self.b = Parameter(f"{name}.b", b)

    def parameters(self):
        return [self.Wx, self.Wh, self.b]


def lstm_cell(x: Var, h_prev: Var, c_prev: Var, params: LstmParams):
    """One step of the gated recurrence; returns (h, c)."""
    h = params.hidden
    z = add(add(matvec(pv(params.Wx), x), matvec(pv(params.Wh), h_prev)), pv(params.b))
    i = sigmoid(take(z, 0, h))
    f = sigmoid(take(z, h, 2 * h))
    g = tanh(take(z, 2 * h, 3 * h))
    o = sigmoid(take(z, 3 * h, 4 * h))
    c = add(mul(f, c_prev), mul(i, g))
    h_new = mul(o, tanh(c))
    return h_new, c


# ---------------------------------------------------------------------------
# gradient oracle


def check_gradients(f, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` takes no arguments, rebuilds its graph from the current parameter
    values, and returns a scalar Var.  Returns the max relative error over
    every coordinate of every parameter in ``params``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.value):
        raise ValueError("non-finite function value in gradient check")
    backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        aflat = a.reshape(-1)
        for j in range(flat.shape[0]):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f().value)
            flat[j] = orig - eps
            fm = float(f().value)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("non-finite function value in gradient check")
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(aflat[j] - numeric) / max(abs(aflat[j]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# tensor block serialization (checkpoint building block)

_DTYPE_TAGS = {0: np.float64, 1: np.float32}
_TAG_OF = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def write_tensor_block(fh, name: str, arr: np.ndarray):
    data = np.asarray(arr)
    if data.ndim and not data.flags["C_CONTIGUOUS"]:
        data = np.ascontiguousarray(data)
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", _TAG_OF[data.dtype]))
    fh.write(struct.pack("<B", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(data.astype(data.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated tensor block")
    return buf


def read_tensor_block(fh):
    """Returns (name, array), or None at a clean end of stream."""
    head = fh.read(4)
    if head == b"":
        return None
    if len(head) != 4:
        raise ValueError("truncated tensor block")
    (nlen,) = struct.unpack("<I", head)
    name = _read_exact(fh, nlen).decode("utf-8")
    (tag,) = struct.unpack("<B", _read_exact(fh, 1))
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = np.dtype(_DTYPE_TAGS[tag]).newbyteorder("<")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    dims = [struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    raw = _read_exact(fh, count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(np.float64)
    return name, arr
