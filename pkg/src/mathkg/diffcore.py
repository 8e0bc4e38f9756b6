"""Dense-tensor computation with reverse-mode automatic differentiation.

Every learnable operation in this package is built from the primitives in
this module: a thin Tensor wrapper over a numpy array, a Tape that records
primitive applications in creation order, vector-Jacobian products replayed
in reverse (which is a reverse topological order, since every input of a
node is created before the node), a bias-corrected Adam optimizer, and a
central-difference gradient checker used as the oracle for every
differentiable primitive.

Conventions:
  * arrays are row-major; matrices and batched (leading-dim) stacks of
    matrices are both supported by the binary ops,
  * every primitive checks its output for NaN/Inf and raises instead of
    propagating silently,
  * recording happens only inside a ``recording(tape)`` block; outside of
    one, ops run as plain numpy (the fast evaluation path).
"""

from __future__ import annotations

import math
import zlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for newly created tensors (tests use float64)."""
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    DEFAULT_DTYPE = dtype


@contextmanager
def dtype_scope(precision: str):
    """Run a block under "float32" or "float64" tensors, then restore."""
    if precision not in ("float32", "float64"):
        raise ValueError(f"unknown precision {precision!r}")
    previous = DEFAULT_DTYPE
    set_default_dtype(np.float32 if precision == "float32" else np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str = "leaf"
        # pairs (parent tensor, vjp function) populated when recorded
        self._parents: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    # Small amount of operator sugar so model code stays readable.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Nodes are appended in creation order, so iterating in reverse visits
    each node after all of its consumers: a valid reverse topological
    order for the chain rule.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []


_ACTIVE: Tape | None = None


@contextmanager
def recording(tape: Tape):
    """Record primitives applied inside the block onto ``tape``."""
    global _ACTIVE
    if _ACTIVE is not None:
        raise RuntimeError("nested recording is not supported")
    _ACTIVE = tape
    try:
        yield tape
    finally:
        _ACTIVE = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind: str, out: np.ndarray) -> None:
    # Fast path: a single reduction. The sum is non-finite whenever any
    # element is, and (at the magnitudes this package produces) only then.
    s = float(out.sum()) if out.size else 0.0
    if not math.isfinite(s):
        if not np.isfinite(out).all():
            raise NonFiniteError(f"{kind} produced a non-finite value")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _record(out: Tensor, kind: str, pairs: Sequence[tuple]) -> None:
    """Attach VJPs for differentiable parents and put the node on the tape."""
    out.op = kind
    if _ACTIVE is None:
        return
    live = tuple((p, fn) for p, fn in pairs if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        _ACTIVE.nodes.append(out)


def backward(tape: Tape, out: Tensor) -> None:
    """Accumulate gradients of scalar ``out`` into ``.grad`` of its ancestry.

    Parameters that never appear on the ancestry keep ``grad=None``;
    callers treat that as a zero gradient (see ``grad_of``).
    """
    if out.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
    out.grad = np.ones_like(out.data)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node._parents:
            contribution = vjp(g)
            if parent.grad is None:
                parent.grad = contribution.copy() if contribution is g else contribution
            else:
                parent.grad = parent.grad + contribution


def grad_of(param: Tensor) -> np.ndarray:
    """Gradient of the last backward pass; zeros when off the ancestry."""
    if param.grad is None:
        return np.zeros_like(param.data)
    return param.grad


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data
    _check_finite("matmul", data)
    out = Tensor(data)
    if _ACTIVE is not None:
        ad, bd = a.data, b.data
        _record(out, "matmul", (
            (a, lambda g: _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)),
            (b, lambda g: _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)),
        ))
    return out


def _binary(kind: str, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        with np.errstate(all="ignore"):
            data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{kind}: {a.shape} vs {b.shape}") from exc
    _check_finite(kind, data)
    out = Tensor(data)
    if _ACTIVE is not None:
        _record(out, kind, (
            (a, lambda g: _unbroadcast(vjp_a(g, a.data, b.data), a.shape)),
            (b, lambda g: _unbroadcast(vjp_b(g, a.data, b.data), b.shape)),
        ))
    return out


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data * c
    _check_finite("scalar_mul", data)
    out = Tensor(data)
    if _ACTIVE is not None:
        _record(out, "scalar_mul", ((a, lambda g: g * c),))
    return out


def _unary(kind: str, a, fwd, vjp) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(all="ignore"):
        data = fwd(a.data)
    _check_finite(kind, data)
    out = Tensor(data)
    if _ACTIVE is not None:
        _record(out, kind, ((a, lambda g: vjp(g, a.data, data)),))
    return out


def sigmoid(a) -> Tensor:
    # tanh form: overflow-free for any argument, single vectorized pass
    return _unary("sigmoid", a, lambda x: 0.5 * (np.tanh(0.5 * x) + 1.0),
                  lambda g, x, y: g * y * (1.0 - y))


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def relu(a) -> Tensor:
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, y: g * (x > 0))


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda g, x, y: g * y)


def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda g, x, y: g / x)


def clip(a, lo: float | None, hi: float | None) -> Tensor:
    """Clamp values; gradient passes through only in the open interval."""
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    _check_finite("clip", data)
    out = Tensor(data)
    if _ACTIVE is not None:
        xd = a.data

        def vjp(g):
            mask = np.ones_like(xd)
            if lo is not None:
                mask = mask * (xd > lo)
            if hi is not None:
                mask = mask * (xd < hi)
            return g * mask

        _record(out, "clip", ((a, vjp),))
    return out


def softmax(a) -> Tensor:
    """Row softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)
    _check_finite("softmax", data)
    out = Tensor(data)
    if _ACTIVE is not None:
        sd = data
        _record(out, "softmax", (
            (a, lambda g: sd * (g - (g * sd).sum(axis=-1, keepdims=True))),
        ))
    return out


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis with a learnable affine.

    The eps guard sits inside the square root, so a constant row maps to
    the affine bias.
    """
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
            f"do not match last dim of {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    _check_finite("layer_norm", data)
    out = Tensor(data)
    if _ACTIVE is None:
        return out
    n = a.shape[-1]
    gd = gamma.data

    def vjp_x(g):
        gg = g * gd
        return inv * (gg - gg.mean(axis=-1, keepdims=True)
                      - xhat * (gg * xhat).mean(axis=-1, keepdims=True))

    def vjp_gamma(g):
        r = g * xhat
        return r.reshape(-1, n).sum(axis=0)

    def vjp_beta(g):
        return g.reshape(-1, n).sum(axis=0)

    _record(out, "layer_norm", ((a, vjp_x), (gamma, vjp_gamma), (beta, vjp_beta)))
    return out


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    _check_finite("concat", data)
    out = Tensor(data)
    if _ACTIVE is None:
        return out
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]
        return vjp

    _record(out, "concat", tuple((p, make_vjp(i)) for i, p in enumerate(parts)))
    return out


def slice_last(a, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis."""
    a = _as_tensor(a)
    data = a.data[..., start:stop]
    out = Tensor(data)
    if _ACTIVE is not None:
        shape = a.shape

        def vjp(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[..., start:stop] = g
            return full

        _record(out, "slice", ((a, vjp),))
    return out


def slice_rows(a, start: int, stop: int) -> Tensor:
    """Contiguous slice along the first axis (splitting packed weights)."""
    a = _as_tensor(a)
    data = a.data[start:stop]
    out = Tensor(data)
    if _ACTIVE is not None:
        shape = a.shape

        def vjp(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[start:stop] = g
            return full

        _record(out, "slice_rows", ((a, vjp),))
    return out


def flip(a, axis: int) -> Tensor:
    """Reverse along one axis."""
    a = _as_tensor(a)
    out = Tensor(np.flip(a.data, axis=axis).copy())
    if _ACTIVE is not None:
        _record(out, "flip", ((a, lambda g: np.flip(g, axis=axis)),))
    return out


def embedding(table, idx) -> Tensor:
    """Row lookup ``table[idx]`` where ``idx`` is an integer array."""
    table = _as_tensor(table)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: index out of range for table with {table.shape[0]} rows")
    data = table.data[idx]
    out = Tensor(data)
    if _ACTIVE is not None:
        shape = table.shape

        def vjp(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, idx, g)
            return full

        _record(out, "embedding", ((table, vjp),))
    return out


def gather(a, flat_idx) -> Tensor:
    """Pick elements of flattened ``a`` at integer positions ``flat_idx``.

    The output takes the shape of ``flat_idx``; repeated indices
    scatter-add in the backward pass.
    """
    a = _as_tensor(a)
    flat_idx = np.asarray(flat_idx)
    flat = a.data.reshape(-1)
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= flat.size):
        raise ShapeError(f"gather: index out of range for {a.shape}")
    data = flat[flat_idx]
    out = Tensor(data)
    if _ACTIVE is not None:
        shape = a.shape
        size = flat.size

        def vjp(g):
            full = np.zeros(size, dtype=g.dtype)
            np.add.at(full, flat_idx.reshape(-1), g.reshape(-1))
            return full.reshape(shape)

        _record(out, "gather", ((a, vjp),))
    return out


def gather_rows(a, idx) -> Tensor:
    """Batched row selection: ``out[b, i] = a[b, idx[b, i]]``."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: got {a.shape} with index {idx.shape}")
    batch = np.arange(a.shape[0])[:, None]
    data = a.data[batch, idx]
    out = Tensor(data)
    if _ACTIVE is not None:
        shape = a.shape

        def vjp(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, (batch, idx), g)
            return full

        _record(out, "gather_rows", ((a, vjp),))
    return out


def dropout(a, p: float, rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None, train: bool = True) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p == 0``."""
    a = _as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    if mask is None:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng or a mask")
        mask = ((rng.random(a.shape) >= p) / (1.0 - p)).astype(DEFAULT_DTYPE)
    data = a.data * mask
    out = Tensor(data)
    if _ACTIVE is not None:
        _record(out, "dropout", ((a, lambda g: g * mask),))
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    _check_finite("sum", data)
    out = Tensor(data)
    if _ACTIVE is not None:
        shape = a.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        _record(out, "sum", ((a, vjp),))
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    _check_finite("mean", data)
    out = Tensor(data)
    if _ACTIVE is not None:
        shape = a.shape
        count = a.data.size if axis is None else a.shape[axis]

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape) / count

        _record(out, "mean", ((a, vjp),))
    return out


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs 2-D+, got {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2))
    if _ACTIVE is not None:
        _record(out, "transpose", ((a, lambda g: np.swapaxes(g, -1, -2)),))
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    if _ACTIVE is not None:
        old = a.shape
        _record(out, "reshape", ((a, lambda g: g.reshape(old)),))
    return out


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    if _ACTIVE is not None:
        old = a.shape
        _record(out, "broadcast", ((a, lambda g: _unbroadcast(g, old)),))
    return out


def linear(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` (the workhorse composite)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        """Apply one update; ``grads`` defaults to each parameter's ``.grad``."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name] if grads is not None else grad_of(p)
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"adam: gradient shape {g.shape} != parameter shape "
                    f"{p.data.shape} for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=self.m[k].dtype).reshape(self.m[k].shape)
            self.v[k] = np.asarray(state["v"][k], dtype=self.v[k].dtype).reshape(self.v[k].shape)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic closure over ``params`` returning a
    scalar Tensor; stochastic functions (dropout with a live rng, fresh
    relaxation noise) are rejected.  The relative error denominator is
    ``max(1, |analytic|, |numeric|)`` per coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    v1 = float(f().data)
    v2 = float(f().data)
    if v1 != v2:
        raise ValueError("finite_difference_check requires a deterministic function")

    tape = Tape()
    zero_grads(params)
    with recording(tape):
        out = f()
    backward(tape, out)
    analytic = [grad_of(p).copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

class RunRng:
    """One seeded stream per run, split into named substreams.

    Substreams (``init``, ``dropout``, ``gumbel``, ``data-shuffle``) are
    derived from (seed, crc32(name)), so two runs with the same seed share
    initializations even when they consume different amounts of dropout or
    relaxation noise.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            ss = np.random.SeedSequence((self.seed, zlib.crc32(name.encode())))
            self._streams[name] = np.random.Generator(np.random.PCG64(ss))
        return self._streams[name]

    def state_dict(self) -> dict:
        return {name: gen.bit_generator.state
                for name, gen in sorted(self._streams.items())}

    def load_state_dict(self, state: dict) -> None:
        for name, bg_state in state.items():
            self.stream(name).bit_generator.state = bg_state
