"""Minimal float64 tensor library with reverse-mode automatic differentiation.

Everything downstream (state-space layers, world models, policies) is built on
this fixed op set. Tensors hold real float64 arrays; complex values are stored
as (re, im) pairs in a trailing axis of size 2 and manipulated through the
dedicated complex_* ops, which keeps the whole engine real-valued.

Graphs are write-once: a backward pass consumes the graph and a second call on
the same loss raises. Forward passes are pure, so tensors may be shared
read-only across threads; concurrent backward on one graph is not supported.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "make_rng",
    "add",
    "mul",
    "neg",
    "matmul",
    "exp",
    "log",
    "tanh",
    "gelu",
    "softmax",
    "logsumexp",
    "tsum",
    "tmean",
    "concat",
    "tslice",
    "reshape",
    "transpose",
    "complex_mul",
    "complex_exp",
    "real_part",
    "straight_through",
    "l2_norm",
    "dot",
    "linear_recurrence",
    "backward",
    "grad_check",
    "GradCheckReport",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class GraphError(RuntimeError):
    """Raised on misuse of the computation graph (e.g. repeated backward)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator; (seed, stream) fully determines draws."""
    key = np.array([np.uint64(seed), np.uint64(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class Tensor:
    """A float64 ndarray plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Constant view of the value: blocks gradient flow (stop-gradient)."""
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Operator sugar; scalars and ndarrays are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Op output: records parents/vjp only when grad is live on some input."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._vjp = vjp
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), vjp)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gg = np.expand_dims(g, axis) if not keepdims else g
        return (gg * (e / s),)

    return _make(out, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:  # dot product
            return g * bd, g * ad
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:  # (n,k)@(k,) -> (n,)
            return np.outer(g, bd), ad.T @ g
        # (k,)@(k,m) -> (m,)
        return bd @ g, np.outer(ad, g)

    return _make(out, (a, b), vjp)


def dot(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Inner product along one axis (batched over the rest)."""
    _check_broadcast(a, b, "dot")
    out = (a.data * b.data).sum(axis=axis)

    def vjp(g):
        gg = np.expand_dims(g, axis)
        return _unbroadcast(gg * b.data, a.shape), _unbroadcast(gg * a.data, b.shape)

    return _make(out, (a, b), vjp)


def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    sq = (a.data * a.data).sum(axis=axis, keepdims=keepdims)
    out = np.sqrt(sq)

    def vjp(g):
        # Subgradient 0 at the origin.
        denom = np.where(out == 0.0, 1.0, out)
        gg = g / denom
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        elif axis is None:
            gg = np.asarray(gg)
        return (gg * a.data,)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, tuple(tensors), vjp)


def tslice(a: Tensor, key) -> Tensor:
    """Basic indexing (ints and step-1 slices); gradient scatters into zeros."""
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------------------
# complex ops over (..., 2) re/im pairs
# ---------------------------------------------------------------------------


def _check_pair(a: Tensor, op: str) -> None:
    if a.shape[-1] != 2:
        raise ShapeError(f"{op}: trailing axis must be (re, im) pair, got {a.shape}")


def _cview(x: np.ndarray) -> np.ndarray:
    """Complex128 view of a contiguous (..., 2) float64 array."""
    x = np.ascontiguousarray(x)
    return x.view(np.complex128)[..., 0]


def _pair(z: np.ndarray) -> np.ndarray:
    out = np.empty(z.shape + (2,), dtype=np.float64)
    out[..., 0] = z.real
    out[..., 1] = z.imag
    return out


def complex_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, "complex_mul")
    _check_pair(b, "complex_mul")
    _check_broadcast(a, b, "complex_mul")
    za, zb = _cview(a.data), _cview(b.data)
    out = _pair(za * zb)

    def vjp(g):
        zg = _cview(g)
        ga = _pair(np.conj(zb) * zg)
        gb = _pair(np.conj(za) * zg)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


def complex_exp(a: Tensor) -> Tensor:
    _check_pair(a, "complex_exp")
    w = np.exp(_cview(a.data))

    def vjp(g):
        return (_pair(np.conj(w) * _cview(g)),)

    return _make(_pair(w), (a,), vjp)


def real_part(a: Tensor) -> Tensor:
    _check_pair(a, "real_part")
    out = np.ascontiguousarray(a.data[..., 0])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[..., 0] = g
        return (full,)

    return _make(out, (a,), vjp)


def straight_through(value: np.ndarray, carrier: Tensor) -> Tensor:
    """Forward `value` as-is; route gradients to `carrier` with identity Jacobian.

    The straight-through estimator for discrete samples: the returned tensor
    holds the sampled value exactly, while backward behaves as if the op were
    the (differentiable) carrier, e.g. class probabilities.
    """
    if value.shape != carrier.shape:
        raise ShapeError(f"straight_through: value {value.shape} vs carrier {carrier.shape}")
    return _make(np.asarray(value, dtype=np.float64), (carrier,), lambda g: (g,))


def linear_recurrence(lam: Tensor, drive: Tensor, gates: np.ndarray) -> Tensor:
    """Gated diagonal complex recurrence x_t = gate_t * lam * x_{t-1} + drive_t.

    lam: (P, 2), drive: (B, T, P, 2), gates: (B, T) float 0/1 array (constant,
    0 resets the state). Returns x: (B, T, P, 2), starting from x_0 = 0. The
    whole scan is one graph node with an analytically derived adjoint, which
    is exactly backpropagation through time over the unrolled recurrence.
    """
    _check_pair(lam, "linear_recurrence")
    _check_pair(drive, "linear_recurrence")
    if drive.data.ndim != 4:
        raise ShapeError(f"linear_recurrence: drive must be (B,T,P,2), got {drive.shape}")
    B, T, P, _ = drive.shape
    if gates.shape != (B, T):
        raise ShapeError(f"linear_recurrence: gates must be {(B, T)}, got {gates.shape}")
    lamc = _cview(lam.data)  # (P,)
    dc = _cview(drive.data)  # (B, T, P)
    gt = gates[..., None]  # (B, T, 1)
    xs = np.empty((B, T, P), dtype=np.complex128)
    x = np.zeros((B, P), dtype=np.complex128)
    for t in range(T):
        x = gt[:, t] * (lamc * x) + dc[:, t]
        xs[:, t] = x

    def vjp(g):
        w = _cview(g)  # adjoint of xs, (B, T, P)
        lam_conj = np.conj(lamc)
        gd = np.empty_like(xs)
        glam = np.zeros(P, dtype=np.complex128)
        acc = np.zeros((B, P), dtype=np.complex128)
        for t in range(T - 1, -1, -1):
            acc = w[:, t] + acc
            gd[:, t] = acc
            x_prev = xs[:, t - 1] if t > 0 else 0.0
            glam += (gt[:, t] * np.conj(x_prev) * acc).sum(axis=0)
            acc = gt[:, t] * lam_conj * acc
        return _pair(glam), _pair(gd)

    return _make(_pair(xs), (lam, drive), vjp)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; grads accumulate into leaves.

    The graph is consumed: calling backward twice on the same loss raises.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed; rerun the forward pass")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not require grad")

    # Iterative topological sort (graphs can be deeper than the recursion limit).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if not p.requires_grad or pg is None:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            node._vjp = None
            node._consumed = True
        else:
            # Leaf: accumulate into .grad.
            node.grad = g if node.grad is None else node.grad + g
    loss._consumed = True


@dataclass
class GradCheckReport:
    """Comparison of backward gradients against central finite differences."""

    max_rel_err: float = 0.0
    max_abs_err: float = 0.0
    per_leaf: dict = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(
    fn,
    leaves: dict[str, Tensor],
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Check d fn / d leaf against central finite differences.

    fn must rebuild its graph on every call and return a scalar Tensor. When
    max_coords is set, only that many randomly chosen coordinates per leaf are
    probed (full sweep otherwise). Relative error is measured against the
    larger coordinate magnitude, floored at 0.1% of the largest gradient seen
    across all leaves: central differences carry roundoff noise proportional
    to the loss scale, so near-zero coordinates cannot be resolved tighter.
    """
    if epsilon <= 0:
        raise ValueError("grad_check: epsilon must be positive")
    for leaf in leaves.values():
        leaf.zero_grad()
    loss = fn()
    backward(loss)
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in leaves.items()}

    all_pairs: dict[str, list[tuple[float, float]]] = {}
    for name, leaf in leaves.items():
        flat = leaf.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = make_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        pairs = []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(fn().data)
            flat[i] = orig - epsilon
            f_minus = float(fn().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            an = analytic[name].reshape(-1)[i]
            pairs.append((float(an), fd))
        all_pairs[name] = pairs

    scale = max(
        (max(abs(an), abs(fd)) for pairs in all_pairs.values() for an, fd in pairs),
        default=0.0,
    )
    floor = max(1e-6, 1e-3 * scale)
    report = GradCheckReport()
    for name, pairs in all_pairs.items():
        worst_rel = 0.0
        worst_abs = 0.0
        for an, fd in pairs:
            abs_err = abs(an - fd)
            rel_err = abs_err / max(abs(an), abs(fd), floor)
            worst_rel = max(worst_rel, rel_err)
            worst_abs = max(worst_abs, abs_err)
        report.per_leaf[name] = {"max_rel_err": worst_rel, "max_abs_err": worst_abs}
        report.max_rel_err = max(report.max_rel_err, worst_rel)
        report.max_abs_err = max(report.max_abs_err, worst_abs)
    return report
