"""Dense float64 tensors with taped reverse-mode differentiation.

A ``Tape`` records every op applied to tracked tensors, in creation order
(which is automatically topological). ``backward`` sweeps the tape once in
reverse and returns a gradient for every registered leaf, zeros included.
Tensors are immutable once created; a tape is single-threaded but distinct
tapes can live on distinct threads.

Broadcasting is restricted to scalar-with-tensor. Everything else is a
shape error on purpose: silent broadcasts are how hand-built engines rot.
"""

from __future__ import annotations

import threading

import numpy as np

from . import kernels as K

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{kind}: incompatible shapes {pretty}")


class Tensor:
    """Immutable float64 array, optionally linked into a tape node."""

    __slots__ = ("values", "node_id")

    def __init__(self, values, node_id: int | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def __float__(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("kind", "input_ids", "out_id", "vjp")

    def __init__(self, kind, input_ids, out_id, vjp):
        self.kind = kind
        self.input_ids = input_ids
        self.out_id = out_id
        self.vjp = vjp  # grad_out -> tuple of grads aligned with input_ids


_stack = threading.local()


def _tapes() -> list:
    if not hasattr(_stack, "items"):
        _stack.items = []
    return _stack.items


def active_tape():
    items = _tapes()
    return items[-1] if items else None


class Tape:
    """Ordered computation record for one forward/backward episode."""

    def __init__(self):
        self.nodes: list[_Node | None] = []
        self.leaf_ids: list[int] = []
        self._shapes: list[tuple[int, ...]] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tapes().pop()
        assert popped is self

    def _new_id(self, shape) -> int:
        self.nodes.append(None)
        self._shapes.append(tuple(shape))
        return len(self.nodes) - 1

    def leaf(self, values) -> Tensor:
        """Register a differentiable leaf (a parameter)."""
        arr = np.array(values, dtype=np.float64)
        arr.flags.writeable = False
        nid = self._new_id(arr.shape)
        self.leaf_ids.append(nid)
        t = Tensor.__new__(Tensor)
        t.values = arr
        t.node_id = nid
        return t

    def _record(self, kind, inputs, out_values, vjp) -> Tensor:
        out_values.flags.writeable = False
        nid = self._new_id(out_values.shape)
        ids = tuple(t.node_id for t in inputs)
        self.nodes[nid] = _Node(kind, ids, nid, vjp)
        out = Tensor.__new__(Tensor)
        out.values = out_values
        out.node_id = nid
        return out

    def gradients(self, loss: Tensor) -> dict[int, Tensor]:
        """Reverse sweep from a scalar loss.

        Returns a gradient tensor for every leaf of this tape; leaves the
        loss does not depend on map to zeros.
        """
        if loss.node_id is None or loss.node_id >= len(self.nodes):
            raise ValueError("loss tensor is not recorded on this tape")
        if loss.values.ndim != 0:
            raise ShapeError("backward", loss.shape)
        acc: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
        for nid in range(loss.node_id, -1, -1):
            node = self.nodes[nid]
            if node is None or nid not in acc:
                continue
            grads = node.vjp(acc[nid])
            for in_id, grad in zip(node.input_ids, grads):
                if in_id is None or grad is None:
                    continue
                if in_id in acc:
                    acc[in_id] = acc[in_id] + grad
                else:
                    acc[in_id] = grad
        out: dict[int, Tensor] = {}
        for lid in self.leaf_ids:
            arr = acc.get(lid)
            if arr is None:
                arr = np.zeros(self._shapes[lid])
            out[lid] = Tensor(arr)
        return out


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Gradient map {leaf node id -> Tensor} on the active tape."""
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    return tape.gradients(loss)


def _as2d(arr: np.ndarray) -> np.ndarray:
    return arr[None, :] if arr.ndim == 1 else arr


def _like(arr: np.ndarray, ref_ndim: int) -> np.ndarray:
    return arr[0] if ref_ndim == 1 else arr


def _emit(kind, inputs, out_values, vjp) -> Tensor:
    """Record when a tape is active and any input is tracked; else constant."""
    tape = active_tape()
    # nb: ascontiguousarray would promote 0-d scalars to 1-d
    out_values = np.asarray(out_values, dtype=np.float64, order="C")
    if tape is not None and any(t.node_id is not None for t in inputs):
        return tape._record(kind, inputs, out_values, vjp)
    out_values.flags.writeable = False
    t = Tensor.__new__(Tensor)
    t.values = out_values
    t.node_id = None
    return t


def _require_matching(kind, a, b):
    if a.shape == b.shape:
        return
    if a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(kind, a.shape, b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)
    out = av @ bv

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _emit("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_matching("add", a.values, b.values)
    av, bv = a.values, b.values
    out = av + bv

    def vjp(g):
        ga = g.sum() if av.ndim == 0 and out.ndim != 0 else g
        gb = g.sum() if bv.ndim == 0 and out.ndim != 0 else g
        return ga, gb

    return _emit("add", (a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_matching("sub", a.values, b.values)
    av, bv = a.values, b.values
    out = av - bv

    def vjp(g):
        ga = g.sum() if av.ndim == 0 and out.ndim != 0 else g
        gb = -(g.sum() if bv.ndim == 0 and out.ndim != 0 else g)
        return ga, gb

    return _emit("sub", (a, b), out, vjp)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.values * c

    def vjp(g):
        return (g * c,)

    return _emit("scalar_mul", (x,), out, vjp)


def masked_scale(x: Tensor, m: float) -> Tensor:
    """Multiply a whole block by a {0,1} mask scalar; gradient scales by m."""
    m = float(m)
    if m not in (0.0, 1.0):
        raise ValueError(f"masked_scale: mask must be 0 or 1, got {m}")
    out = x.values * m

    def vjp(g):
        return (g * m,)

    return _emit("masked_scale", (x,), out, vjp)


def relu(x: Tensor) -> Tensor:
    xv = _as2d(x.values)
    out = _like(K.relu_fwd(xv), x.ndim)

    def vjp(g):
        return (_like(K.relu_bwd(xv, _as2d(np.ascontiguousarray(g))), x.ndim),)

    return _emit("relu", (x,), out, vjp)


def concat_last_axis(*xs: Tensor) -> Tensor:
    if len(xs) < 1:
        raise ValueError("concat_last_axis: needs at least one input")
    lead = [t.values.shape[:-1] for t in xs]
    if xs[0].values.ndim == 0 or any(s != lead[0] for s in lead):
        raise ShapeError("concat_last_axis", *[t.shape for t in xs])
    widths = [t.values.shape[-1] for t in xs]
    out = np.concatenate([t.values for t in xs], axis=-1)
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(xs)))

    return _emit("concat_last_axis", xs, out, vjp)


def reduce_sum(x: Tensor) -> Tensor:
    if x.values.size == 0:
        raise ShapeError("reduce_sum", x.shape)
    out = np.asarray(x.values.sum())
    shape = x.values.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _emit("reduce_sum", (x,), out, vjp)


def reduce_mean(x: Tensor) -> Tensor:
    if x.values.size == 0:
        raise ShapeError("reduce_mean", x.shape)
    out = np.asarray(x.values.mean())
    shape, size = x.values.shape, x.values.size

    def vjp(g):
        return (np.full(shape, float(g) / size),)

    return _emit("reduce_mean", (x,), out, vjp)


def _rowwise_guard(kind, x: Tensor):
    if x.ndim not in (1, 2) or x.values.shape[-1] == 0:
        raise ShapeError(kind, x.shape)


def softmax_last_axis(x: Tensor) -> Tensor:
    _rowwise_guard("softmax_last_axis", x)
    p2 = K.softmax_fwd(_as2d(x.values))
    out = _like(p2, x.ndim)

    def vjp(g):
        return (_like(K.softmax_bwd(p2, _as2d(np.ascontiguousarray(g))), x.ndim),)

    return _emit("softmax_last_axis", (x,), out, vjp)


def log_softmax_last_axis(x: Tensor) -> Tensor:
    _rowwise_guard("log_softmax_last_axis", x)
    lp2 = K.log_softmax_fwd(_as2d(x.values))
    out = _like(lp2, x.ndim)

    def vjp(g):
        return (_like(K.log_softmax_bwd(lp2, _as2d(np.ascontiguousarray(g))), x.ndim),)

    return _emit("log_softmax_last_axis", (x,), out, vjp)


def layer_norm_last_axis(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    _rowwise_guard("layer_norm_last_axis", x)
    y2, inv_std, floored = K.layer_norm_fwd(_as2d(x.values), eps)
    out = _like(y2, x.ndim)

    def vjp(g):
        return (_like(K.layer_norm_bwd(y2, inv_std, floored, _as2d(np.ascontiguousarray(g))), x.ndim),)

    return _emit("layer_norm_last_axis", (x,), out, vjp)


def max_last_axis(x: Tensor) -> Tensor:
    _rowwise_guard("max_last_axis", x)
    x2 = _as2d(x.values)
    vals, idx = K.max_last_fwd(x2)
    out = vals[0] if x.ndim == 1 else vals
    n_cols = x2.shape[1]

    def vjp(g):
        g1 = np.atleast_1d(np.ascontiguousarray(g, dtype=np.float64))
        return (_like(K.max_last_bwd(idx, g1, n_cols), x.ndim),)

    return _emit("max_last_axis", (x,), out, vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    lv = logits.values
    if lv.ndim != 2 or lv.shape[0] == 0 or lv.shape[1] == 0 or labels.shape != (lv.shape[0],):
        raise ShapeError("cross_entropy", lv.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= lv.shape[1]:
        raise ValueError("cross_entropy: labels out of range")
    loss, probs = K.cross_entropy_fwd(np.ascontiguousarray(lv), labels)

    def vjp(g):
        return (K.cross_entropy_bwd(probs, labels, float(g)),)

    return _emit("cross_entropy", (logits,), np.asarray(loss), vjp)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    if p.shape != q.shape or p.ndim not in (1, 2) or p.values.shape[-1] == 0 or p.values.size == 0:
        raise ShapeError("kl_divergence", p.shape, q.shape)
    p2 = np.ascontiguousarray(_as2d(p.values))
    q2 = np.ascontiguousarray(_as2d(q.values))
    out = K.kl_fwd(p2, q2)

    def vjp(g):
        gp = K.kl_bwd_p(p2, q2, float(g))
        gq = K.kl_bwd_q(p2, q2, float(g))
        return _like(gp, p.ndim), _like(gq, q.ndim)

    return _emit("kl_divergence", (p, q), np.asarray(out), vjp)


_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "scalar_mul": scalar_mul,
    "relu": relu,
    "concat_last_axis": concat_last_axis,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "softmax_last_axis": softmax_last_axis,
    "log_softmax_last_axis": log_softmax_last_axis,
    "layer_norm_last_axis": layer_norm_last_axis,
    "cross_entropy": cross_entropy,
    "kl_divergence": kl_divergence,
    "max_last_axis": max_last_axis,
    "masked_scale": masked_scale,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Uniform entry point over every primitive, dispatching on kind."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def constant(values) -> Tensor:
    """An untracked tensor; gradients never flow into it."""
    return Tensor(np.array(values, dtype=np.float64))


def finite_difference_gradient(f, params: Tensor, h: float) -> Tensor:
    """Central-difference gradient of a scalar function, coordinate by
    coordinate: (f(p + h e_i) - f(p - h e_i)) / (2h)."""
    if h <= 0:
        raise ValueError("finite_difference_gradient: h must be positive")
    base = np.array(params.values, dtype=np.float64)
    flat = base.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(Tensor(base.copy())))
        flat[i] = orig - h
        lo = float(f(Tensor(base.copy())))
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * h)
    return Tensor(grad.reshape(base.shape))
