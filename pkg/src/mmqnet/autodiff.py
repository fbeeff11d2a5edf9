"""Reverse-mode automatic differentiation on dense float64 tensors.

Small closure-based engine: each op records its parents and a backward rule
on the output tensor, and ``backward`` replays the implicit tape in reverse
topological order. Every forward output is checked finite, so numerical
blowups surface at the op that produced them.

Also owns the binary tensor-file format used for checkpoints.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

MASK_NEG = -1e9            # additive mask value for disallowed attention keys
CHECKPOINT_MAGIC = b"MMQP"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class FormatError(ValueError):
    """Malformed tensor file."""


class Tensor:
    """Dense float64 array plus an optional gradient buffer and tape links."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar, delegating to the op functions below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, checking finiteness and recording the tape edge."""
    if not np.isfinite(data).all():
        raise NumericError("non-finite value in forward pass")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# core ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _make(a.data - b.data, (a, b), backward)


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "hadamard")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return _make(a.data * c, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions broadcast (2-D weights allowed)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


def bias_add(x, b) -> Tensor:
    """Add a rank-1 bias over the trailing dimension of x."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: {x.shape} + {b.shape}")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                key = [slice(None)] * g.ndim
                key[axis] = slice(lo, hi)
                t.accumulate(g[tuple(key)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def slice_(a, key) -> Tensor:
    """Basic slicing/indexing; gradient scatters back into the source shape."""
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] = g
            a.accumulate(buf)

    return _make(a.data[key].copy(), (a,), backward)


def tile_leading(a, n: int) -> Tensor:
    """Repeat a tensor n times along a new leading (batch) dimension."""
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.sum(axis=0))

    return _make(np.broadcast_to(a.data, (n,) + a.shape).copy(), (a,), backward)


def mask_rows(a, keep: np.ndarray) -> Tensor:
    """Zero entries where `keep` is 0; kept entries pass through unchanged.

    Unlike multiplying by a 0/1 matrix this writes exact +0.0 (no negative
    zeros), so masked entries are bit-identical regardless of input content.
    """
    a = _as_tensor(a)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape:
        raise ShapeError(f"mask_rows: mask {keep.shape} vs tensor {a.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.where(keep, g, 0.0))

    return _make(np.where(keep, a.data, 0.0), (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * pos)

    return _make(np.maximum(a.data, 0.0), (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def softmax_lastdim(logits, additive_mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last dim, after adding an optional constant mask.

    Mask entries must be 0 (allowed) or MASK_NEG (disallowed); every row is
    assumed to keep at least one allowed entry.
    """
    logits = _as_tensor(logits)
    z = logits.data if additive_mask is None else logits.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if logits.requires_grad:
            inner = (g * s).sum(axis=-1, keepdims=True)
            logits.accumulate(s * (g - inner))

    return _make(s, (logits,), backward)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), backward)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, float(g) / n))

    return _make(np.asarray(a.data.mean()), (a,), backward)


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        coeff = 2.0 * float(g) / n
        if a.requires_grad:
            a.accumulate(coeff * diff)
        if b.requires_grad:
            b.accumulate(-coeff * diff)

    return _make(np.asarray(np.mean(diff * diff)), (a, b), backward)


def cross_entropy_with_logits(logits, onehot: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) rows and one-hot targets."""
    logits = _as_tensor(logits)
    onehot = np.asarray(onehot, dtype=np.float64)
    if logits.data.ndim != 2 or logits.shape != onehot.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {onehot.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    ce = -(onehot * logp).sum(axis=1).mean()

    def backward(g):
        if logits.requires_grad:
            probs = np.exp(logp)
            logits.accumulate(float(g) * (probs - onehot) / n)

    return _make(np.asarray(ce), (logits,), backward)


def log_softmax_lastdim(logits) -> Tensor:
    """Row log-probabilities over the last dim."""
    logits = _as_tensor(logits)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse

    def backward(g):
        if logits.requires_grad:
            probs = np.exp(logp)
            logits.accumulate(g - probs * g.sum(axis=-1, keepdims=True))

    return _make(logp, (logits,), backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the trailing dimension to zero mean, unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv_std * (gx - m1 - xhat * m2))

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Fill ``grad`` on every requires_grad leaf reachable from a scalar loss."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward root must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def grad_check(f, xs, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the tensors in ``xs`` to a scalar Tensor; ``xs`` may be a
    single Tensor or a sequence. Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    for x in xs:
        x.requires_grad = True
        x.zero_grad()
    loss = f(*xs)
    backward(loss)
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in xs]

    worst = 0.0
    for x, ana in zip(xs, analytic):
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*xs).item()
            flat[i] = orig - eps
            lo = f(*xs).item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            a = ana.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 6e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# tensor file format (checkpoints)


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors: magic, u16 version, u32 count, then per
    tensor u16 name length + UTF-8 name, u8 rank, u32 dims, f64 LE payload."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(named)))
        for name, arr in named.items():
            arr = np.asarray(arr, dtype=np.float64)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)

    def take(n: int) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise FormatError("truncated tensor file")
        head, view = view[:n], view[n:]
        return head

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, not a tensor file")
    version, count = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        payload = take(8 * size)
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if len(view) != 0:
        raise FormatError("trailing bytes after last tensor")
    return out
