"""Minimal dense-tensor math with reverse-mode autodiff, Adam, and seeded RNG.

Tensors wrap numpy arrays (float32 by default) and record a dynamic tape;
calling :func:`backward` on a scalar loss fills ``.grad`` on every tracked
tensor reachable from it.  The op set is deliberately small: just what a
small GCN + Transformer stack needs.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float32

# Debug switch: when on, every op output is checked for NaN/Inf.
_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._backward_done = False

    @property
    def shape(self):
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

    def zero_grad(self) -> None:
        self.grad = None
        self._backward_done = False

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # light operator sugar; the module-level functions are the real API
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return hadamard(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __sub__(self, other):
        return sub(self, other)


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    """Untracked tensor wrapping fixed data (masks, precomputed encodings)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _make(out_data, parents, backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by op")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out._backward_done = False
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# core op set
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def hadamard(a: Tensor, b) -> Tensor:
    """Elementwise product with broadcast; Eq-style column masks reuse this."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = a.data * np.asarray(s, dtype=a.data.dtype)

    def backward(g):
        _accumulate(a, g * s)

    return _make(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked leading dims must match exactly or be absent."""
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(out_data, (a,), backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows/elements along an axis; gradients scatter-add back."""
    indices = np.asarray(indices, dtype=np.int64)
    out_data = np.take(a.data, indices, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(ga, indices, g)
        else:
            moved = np.moveaxis(ga, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        _accumulate(a, ga)

    return _make(out_data, (a,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table; grads flow only to accessed rows."""
    return take(table, np.asarray(ids, dtype=np.int64), axis=0)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; gradients pass only through the unclipped region."""
    out_data = np.clip(a.data, low, high)

    def backward(g):
        _accumulate(a, g * ((a.data >= low) & (a.data <= high)))

    return _make(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def backward(g):
        _accumulate(a, -g * out_data * out_data)

    return _make(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make(out_data, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    out_data = normed * gain.data + bias.data

    def backward(g):
        g_norm = g * gain.data
        # d/dx of (x - mu) * inv_std with mu, var both functions of x
        gx = inv_std * (
            g_norm
            - g_norm.mean(axis=-1, keepdims=True)
            - normed * (g_norm * normed).mean(axis=-1, keepdims=True)
        )
        _accumulate(a, gx)
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * normed).sum(axis=reduce_axes))
        _accumulate(bias, g.sum(axis=reduce_axes))

    return _make(out_data, (a, gain, bias), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g2, a.data.shape).copy())

    return _make(np.asarray(out_data, dtype=a.data.dtype), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        denom = a.data.size
    else:
        denom = a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / denom)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-softmax over non-ignored positions.

    ``logits`` is (N, C); ``targets`` holds class ids in [0, C) or
    ``ignore_index``.  Raises if every position is ignored.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects 2-D logits (N, C)")
    if targets.shape != (logits.data.shape[0],):
        raise ValueError("targets must be 1-D aligned with logits rows")
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("all positions ignored in cross_entropy")
    safe_targets = np.where(valid, targets, 0)
    if safe_targets.max() >= logits.data.shape[1]:
        raise ValueError("target class id out of range")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(targets)), safe_targets]
    losses = (lse - picked) * valid
    out_data = np.asarray(losses.sum() / n_valid, dtype=logits.data.dtype)

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(len(targets)), safe_targets] -= 1.0
        probs *= (valid / n_valid)[:, None]
        _accumulate(logits, probs * g)

    return _make(out_data, (logits,), backward)


def binary_cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean BCE between probabilities in (0,1) and 0/1 targets."""
    targets = np.asarray(targets, dtype=probs.data.dtype)
    if targets.shape != probs.data.shape:
        raise ValueError("targets/probs length mismatch")
    eps = 1e-7
    p = np.clip(probs.data, eps, 1.0 - eps)
    losses = -(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p))
    out_data = np.asarray(losses.mean(), dtype=probs.data.dtype)
    n = probs.data.size

    def backward(g):
        gp = (p - targets) / (p * (1.0 - p)) / n
        gp = gp * (np.abs(probs.data - p) < eps)  # zero grad where clipped
        _accumulate(probs, gp * g)

    return _make(out_data, (probs,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy straight from logits.

    Numerically stable at any saturation: the gradient is
    (sigmoid(z) - y) / n, never pinched by probability clipping.
    """
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if targets.shape != logits.data.shape:
        raise ValueError("targets/logits length mismatch")
    z = logits.data
    # softplus(z) - z*y, with softplus computed stably
    losses = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray(losses.mean(), dtype=logits.data.dtype)
    n = logits.data.size

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        _accumulate(logits, (sig - targets) / n * g)

    return _make(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate dLoss/d(tensor) for every tracked tensor behind ``loss``."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss._backward_done:
        raise RuntimeError("backward already ran on this loss; reset grads first")
    loss._backward_done = True
    if not loss.requires_grad:
        return

    # iterative topo sort (graphs can be deep enough to bother recursion)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction; state keyed on tensor identity."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / b1t
            v_hat = v / b2t
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: dict,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One functional Adam update; ``state`` holds t/m/v and must be pre-seeded
    via ``init_adam_state``."""
    state["t"] += 1
    t = state["t"]
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state["m"][i]
        v = state["v"][i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def init_adam_state(params: list[Tensor]) -> dict:
    return {"t": 0,
            "m": [np.zeros_like(p.data) for p in params],
            "v": [np.zeros_like(p.data) for p in params]}


# ---------------------------------------------------------------------------
# seeded, splittable RNG
# ---------------------------------------------------------------------------

def _key_hash(key) -> int:
    return zlib.crc32(str(key).encode("utf-8"))


class SeededRng:
    """Deterministic RNG; ``split(key)`` derives an independent child stream.

    Identical seed plus identical split keys reproduce identical draws
    regardless of what sibling streams consumed.
    """

    def __init__(self, entropy):
        if isinstance(entropy, int):
            entropy = (entropy,)
        self._entropy = tuple(int(e) for e in entropy)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy)))

    def split(self, key) -> "SeededRng":
        return SeededRng(self._entropy + (_key_hash(key),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.gen.permutation(x)

    def shuffle(self, x) -> None:
        self.gen.shuffle(x)


def seeded_rng(seed: int) -> SeededRng:
    return SeededRng(seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """Write parameters as portable JSON: name -> {shape, flat float list}."""
    payload = {
        "meta": meta or {},
        "params": {
            name: {
                "shape": list(t.data.shape),
                "data": [float(x) for x in np.asarray(t.data, dtype=np.float32).ravel()],
            }
            for name, t in params.items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_checkpoint(path, expected_shapes: dict[str, tuple] | None = None):
    """Load a checkpoint; optionally validate shapes against a model definition.

    Returns (arrays, meta) with float32 arrays keyed by parameter name.
    """
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    arrays = {}
    for name, entry in payload["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float32).reshape(entry["shape"])
        arrays[name] = arr
    if expected_shapes is not None:
        missing = set(expected_shapes) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
        for name, shape in expected_shapes.items():
            if tuple(arrays[name].shape) != tuple(shape):
                raise ValueError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{arrays[name].shape} != {tuple(shape)}")
    return arrays, payload.get("meta", {})
