"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation applied to tensors created on it.
Calling :meth:`Tape.backward` walks the recorded nodes in reverse insertion
order and accumulates vector-Jacobian products. Forward ops run without a
tape too; the result is then a plain detached tensor, which is how
inference avoids bookkeeping.

Example::

    with Tape() as tape:
        w = tape.leaf(np.ones((3, 2)))
        x = Tensor(np.random.rand(4, 3))
        loss = forward("mse", [x @ w, 0.0])
    grads = tape.backward(loss)
    grads[w.node_id]  # dloss/dw
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import (
    DanglingNode,
    KinkUnavoidable,
    NonFinite,
    NotScalarLoss,
    ShapeMismatch,
    UnsupportedOp,
)

_EXP_MAX = 700.0  # exp(709) is the float64 ceiling

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array, optionally attached to a node on a tape."""

    __slots__ = ("data", "node_id", "tape")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to our reflected ops

    def __init__(self, data, node_id: int | None = None, tape: Tape | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

    def __add__(self, other):
        return forward("add", [self, other])

    def __radd__(self, other):
        return forward("add", [other, self])

    def __sub__(self, other):
        return forward("sub", [self, other])

    def __rsub__(self, other):
        return forward("sub", [other, self])

    def __mul__(self, other):
        return forward("mul", [self, other])

    def __rmul__(self, other):
        return forward("mul", [other, self])

    def __neg__(self):
        return forward("mul", [self, -1.0])

    def __matmul__(self, other):
        return forward("matmul", [self, other])

    def __rmatmul__(self, other):
        return forward("matmul", [other, self])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward("reshape", [self], {"shape": shape})


@dataclass
class Node:
    op: str
    parents: tuple[int | None, ...]
    ctx: Any
    requires_grad: bool
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Append-only record of operations; node ids are insertion indices."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def leaf(self, data, requires_grad: bool = True) -> Tensor:
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFinite("leaf tensor contains NaN or Inf")
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, requires_grad, arr.shape))
        return Tensor(arr, node_id, self)

    def _record(self, op, parents, ctx, requires_grad, shape) -> int:
        node_id = len(self.nodes)
        for p in parents:
            if p is not None and not (0 <= p < node_id):
                raise DanglingNode(f"parent {p} is not on this tape before node {node_id}")
        self.nodes.append(Node(op, tuple(parents), ctx, requires_grad, shape))
        return node_id

    def custom(self, inputs: Sequence, out: np.ndarray, vjp: Callable) -> Tensor:
        """Splice a hand-differentiated function into the tape.

        ``vjp(g)`` must return one gradient (or None) per input.
        """
        tensors = [_as_tensor(t) for t in inputs]
        parents = [self._parent_id(t) for t in tensors]
        requires = any(p is not None and self.nodes[p].requires_grad for p in parents)
        out = np.asarray(out, dtype=np.float64)
        node_id = self._record("custom", parents, vjp, requires, out.shape)
        return Tensor(out, node_id, self)

    def _parent_id(self, t: Tensor) -> int | None:
        if t.node_id is None:
            return None
        if t.tape is not self:
            raise DanglingNode("tensor belongs to a different tape")
        return t.node_id

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Return dloss/dnode for every grad-requiring node up to ``loss``.

        Nodes the loss does not depend on get zero gradients. The tape is
        left intact so this may be called repeatedly.
        """
        if loss.size != 1:
            raise NotScalarLoss(f"loss has shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise DanglingNode("loss is not recorded on this tape")
        top = loss.node_id
        grads: dict[int, np.ndarray] = {top: np.ones(self.nodes[top].shape)}
        for k in range(top, -1, -1):
            g = grads.get(k)
            node = self.nodes[k]
            if g is None or node.op == "leaf" or not node.requires_grad:
                continue
            needs = [p is not None and self.nodes[p].requires_grad for p in node.parents]
            if node.op == "custom":
                parent_grads = node.ctx(g)
            else:
                parent_grads = _OPS[node.op][1](node.ctx, g, needs)
            for p, need, gp in zip(node.parents, needs, parent_grads):
                if not need or gp is None:
                    continue
                gp = np.asarray(gp, dtype=np.float64)
                if gp.shape != self.nodes[p].shape:
                    raise ShapeMismatch(
                        f"{node.op} produced grad {gp.shape} for node of shape {self.nodes[p].shape}"
                    )
                grads[p] = grads[p] + gp if p in grads else gp
        out = {}
        for k in range(top + 1):
            node = self.nodes[k]
            if node.requires_grad:
                out[k] = grads[k] if k in grads else np.zeros(node.shape)
        return out

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        grads = self.backward(loss)
        return [grads.get(t.node_id, np.zeros(t.shape)) for t in wrt]


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward(op_kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Apply ``op_kind`` to ``inputs`` and record it on the active tape.

    Inputs may be tensors, arrays or scalars; non-tensors are constants.
    With no active tape and no taped inputs, nothing is recorded.
    """
    if op_kind not in _OPS:
        raise UnsupportedOp(op_kind)
    tensors = [_as_tensor(t) for t in inputs]
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFinite(f"{op_kind}: input contains NaN or Inf")
    out, ctx = _OPS[op_kind][0]([t.data for t in tensors], attrs or {})
    tape = active_tape()
    if tape is None:
        tape = next((t.tape for t in tensors if t.tape is not None), None)
    if tape is None:
        return Tensor(out)
    parents = [tape._parent_id(t) for t in tensors]
    requires = any(p is not None and tape.nodes[p].requires_grad for p in parents)
    node_id = tape._record(op_kind, parents, ctx, requires, out.shape)
    return Tensor(out, node_id, tape)


# ---------------------------------------------------------------- op kernels
# Each entry: forward(arrays, attrs) -> (out, ctx); backward(ctx, g, needs) -> grads.


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _add_f(xs, attrs):
    a, b = xs
    _broadcast_shape(a, b, "add")
    return a + b, (a.shape, b.shape)


def _add_b(ctx, g, needs):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_f(xs, attrs):
    a, b = xs
    _broadcast_shape(a, b, "sub")
    return a - b, (a.shape, b.shape)


def _sub_b(ctx, g, needs):
    sa, sb = ctx
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def _mul_f(xs, attrs):
    a, b = xs
    _broadcast_shape(a, b, "mul")
    return a * b, (a, b)


def _mul_b(ctx, g, needs):
    a, b = ctx
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def _matmul_f(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _matmul_b(ctx, g, needs):
    a, b = ctx
    return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


def _conv_pad(padding: str, k: int) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        if k % 2 == 0:
            raise ShapeMismatch("same padding needs an odd kernel")
        return (k - 1) // 2
    raise ShapeMismatch(f"unknown padding {padding!r}")


def _conv2d_f(xs, attrs):
    x, w = xs
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {w.shape}")
    k = w.shape[2]
    pad = _conv_pad(attrs.get("padding", "valid"), k)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, hp, wp = x.shape
    ho, wo = hp - k + 1, wp - k + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d: input {x.shape} smaller than kernel")
    # im2col in (k, k, C, N, Ho, Wo) order so every slice copy is contiguous
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((k, k, c, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[i, j] = xt[:, :, i:i + ho, j:j + wo]
    cols = cols.reshape(k * k * c, n * ho * wo)
    wmat = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
    out = (wmat @ cols).reshape(w.shape[0], n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), (cols, wmat, w.shape, x.shape, pad)


def _conv2d_b(ctx, g, needs):
    cols, wmat, wshape, xshape, pad = ctx
    f, c, k, _ = wshape
    n, _, hp, wp = xshape
    ho, wo = hp - k + 1, wp - k + 1
    gmat = g.transpose(1, 0, 2, 3).reshape(f, -1)
    gx = gw = None
    if needs[1]:
        gw = (gmat @ cols.T).reshape(f, k, k, c).transpose(0, 3, 1, 2)
    if needs[0]:
        gcols = (wmat.T @ gmat).reshape(k, k, c, n, ho, wo)
        gxt = np.zeros((c, n, hp, wp))
        for i in range(k):
            for j in range(k):
                gxt[:, :, i:i + ho, j:j + wo] += gcols[i, j]
        if pad:
            gxt = gxt[:, :, pad:-pad, pad:-pad]
        gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3))
    return gx, gw


def _maxpool_f(xs, attrs):
    (x,) = xs
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeMismatch(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def _maxpool_b(ctx, g, needs):
    idx, shape = ctx
    n, c, h, w = shape
    gw = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
    gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
    return (gx,)


def _upsample_f(xs, attrs):
    (x,) = xs
    if x.ndim != 4:
        raise ShapeMismatch(f"upsample2x needs a 4-d input, got {x.shape}")
    return x.repeat(2, axis=2).repeat(2, axis=3), x.shape


def _upsample_b(ctx, g, needs):
    n, c, h, w = ctx
    return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)


def _relu_f(xs, attrs):
    (x,) = xs
    mask = x > 0
    return x * mask, mask


def _relu_b(mask, g, needs):
    return (g * mask,)


def _sigmoid_f(xs, attrs):
    (x,) = xs
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    s[~pos] = e / (1.0 + e)
    return s, s


def _sigmoid_b(s, g, needs):
    return (g * s * (1.0 - s),)


def _tanh_f(xs, attrs):
    t = np.tanh(xs[0])
    return t, t


def _tanh_b(t, g, needs):
    return (g * (1.0 - t * t),)


def _exp_f(xs, attrs):
    e = np.exp(np.minimum(xs[0], _EXP_MAX))
    return e, (e, xs[0] <= _EXP_MAX)


def _exp_b(ctx, g, needs):
    e, live = ctx
    return (g * e * live,)


def _reshape_f(xs, attrs):
    (x,) = xs
    try:
        out = x.reshape(attrs["shape"])
    except ValueError:
        raise ShapeMismatch(f"reshape {x.shape} -> {attrs['shape']}") from None
    return out, x.shape


def _reshape_b(shape, g, needs):
    return (g.reshape(shape),)


def _concat_f(xs, attrs):
    axis = attrs.get("axis", -1)
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: {[x.shape for x in xs]} along {axis}") from None
    sizes = [x.shape[axis] for x in xs]
    return out, (axis, np.cumsum(sizes)[:-1])


def _concat_b(ctx, g, needs):
    axis, cuts = ctx
    return tuple(np.split(g, cuts, axis=axis))


def _sum_f(xs, attrs):
    return np.asarray(xs[0].sum()), xs[0].shape


def _sum_b(shape, g, needs):
    return (np.broadcast_to(g, shape).copy(),)


def _mse_f(xs, attrs):
    a, b = xs
    _broadcast_shape(a, b, "mse")
    diff = a - b
    return np.asarray(np.mean(diff * diff)), (diff, a.shape, b.shape)


def _mse_b(ctx, g, needs):
    diff, sa, sb = ctx
    gd = (2.0 / diff.size) * g * diff
    return _unbroadcast(gd, sa), -_unbroadcast(gd, sb)


def _softmax_ce_f(xs, attrs):
    (logits,) = xs
    labels = np.asarray(attrs["labels"], dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeMismatch("softmax_cross_entropy: label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    return np.asarray(loss), (np.exp(logp), labels)


def _softmax_ce_b(ctx, g, needs):
    probs, labels = ctx
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return (g * d / n,)


def _kl_f(xs, attrs):
    mu, logvar = xs
    if mu.shape != logvar.shape or mu.ndim != 2:
        raise ShapeMismatch(f"gaussian_kl: mu {mu.shape}, logvar {logvar.shape}")
    ev = np.exp(np.minimum(logvar, _EXP_MAX))
    per = -0.5 * np.sum(1.0 + logvar - mu * mu - ev, axis=1)
    return np.asarray(per.mean()), (mu, ev)


def _kl_b(ctx, g, needs):
    mu, ev = ctx
    n = mu.shape[0]
    return g * mu / n, g * -0.5 * (1.0 - ev) / n


def _reparam_f(xs, attrs):
    mu, logvar, noise = xs
    if not (mu.shape == logvar.shape == noise.shape):
        raise ShapeMismatch(f"reparameterize: {mu.shape}, {logvar.shape}, {noise.shape}")
    sd = np.exp(np.minimum(0.5 * logvar, _EXP_MAX))
    return mu + sd * noise, (sd, noise)


def _reparam_b(ctx, g, needs):
    sd, noise = ctx
    return g, g * noise * sd * 0.5, g * sd


def _clip01_f(xs, attrs):
    (x,) = xs
    return np.clip(x, 0.0, 1.0), (x >= 0.0) & (x <= 1.0)


def _clip01_b(mask, g, needs):
    return (g * mask,)


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_f, _add_b),
    "sub": (_sub_f, _sub_b),
    "mul": (_mul_f, _mul_b),
    "matmul": (_matmul_f, _matmul_b),
    "conv2d": (_conv2d_f, _conv2d_b),
    "maxpool2x2": (_maxpool_f, _maxpool_b),
    "upsample2x": (_upsample_f, _upsample_b),
    "relu": (_relu_f, _relu_b),
    "sigmoid": (_sigmoid_f, _sigmoid_b),
    "tanh": (_tanh_f, _tanh_b),
    "exp": (_exp_f, _exp_b),
    "reshape": (_reshape_f, _reshape_b),
    "concat": (_concat_f, _concat_b),
    "sum": (_sum_f, _sum_b),
    "mse": (_mse_f, _mse_b),
    "softmax_cross_entropy": (_softmax_ce_f, _softmax_ce_b),
    "gaussian_kl": (_kl_f, _kl_b),
    "reparameterize": (_reparam_f, _reparam_b),
    "clip01": (_clip01_f, _clip01_b),
}

OP_KINDS = tuple(_OPS)


# ------------------------------------------------------------- conveniences


def relu(x):
    return forward("relu", [x])


def sigmoid(x):
    return forward("sigmoid", [x])


def tanh(x):
    return forward("tanh", [x])


def exp(x):
    return forward("exp", [x])


def conv2d(x, w, padding="valid"):
    return forward("conv2d", [x, w], {"padding": padding})


def maxpool2x2(x):
    return forward("maxpool2x2", [x])


def upsample2x(x):
    return forward("upsample2x", [x])


def concat(xs, axis=-1):
    return forward("concat", list(xs), {"axis": axis})


def total(x):
    return forward("sum", [x])


def mse(a, b):
    return forward("mse", [a, b])


def softmax_cross_entropy(logits, labels):
    return forward("softmax_cross_entropy", [logits], {"labels": labels})


def gaussian_kl(mu, logvar):
    return forward("gaussian_kl", [mu, logvar])


def reparameterize(mu, logvar, noise):
    return forward("reparameterize", [mu, logvar, noise])


def clip01(x):
    return forward("clip01", [x])


# ------------------------------------------------------- gradient checking

_KINK_MARGIN = 1e-4


def _default_case(op_kind, shapes, rng):
    """Random inputs and attrs for checking ``op_kind`` at a generic point."""
    attrs: dict = {}
    if op_kind == "softmax_cross_entropy":
        (shape,) = shapes
        attrs["labels"] = rng.integers(0, shape[1], size=shape[0])
    elif op_kind == "reshape":
        attrs["shape"] = (-1,)
    elif op_kind == "concat":
        attrs["axis"] = 1
    elif op_kind == "conv2d":
        attrs["padding"] = "same"
    inputs = [rng.standard_normal(s) for s in shapes]
    if op_kind == "clip01":
        inputs = [rng.uniform(-0.5, 1.5, s) for s in shapes]
    return inputs, attrs


def _near_kink(op_kind, inputs) -> bool:
    x = inputs[0]
    if op_kind == "relu":
        return bool(np.any(np.abs(x) < _KINK_MARGIN))
    if op_kind == "clip01":
        return bool(np.any(np.abs(x) < _KINK_MARGIN) or np.any(np.abs(x - 1) < _KINK_MARGIN))
    if op_kind == "maxpool2x2":
        n, c, h, w = x.shape
        win = np.sort(
            x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4),
            axis=-1,
        )
        return bool(np.any(win[..., -1] - win[..., -2] < _KINK_MARGIN))
    return False


def _default_shapes(op_kind):
    return {
        "matmul": [(3, 4), (4, 2)],
        "conv2d": [(2, 2, 5, 5), (3, 2, 3, 3)],
        "maxpool2x2": [(2, 2, 4, 4)],
        "upsample2x": [(2, 2, 3, 3)],
        "concat": [(3, 2), (3, 4)],
        "add": [(3, 4), (4,)],
        "sub": [(3, 4), (3, 1)],
        "mul": [(3, 4), (3, 4)],
        "mse": [(3, 4), (3, 4)],
        "softmax_cross_entropy": [(4, 10)],
        "gaussian_kl": [(4, 3), (4, 3)],
        "reparameterize": [(4, 3), (4, 3), (4, 3)],
    }.get(op_kind, [(4, 4)])


def finite_diff_check(op_kind: str, input_shapes=None, seed: int = 0, h: float = 1e-5,
                      attrs: dict | None = None) -> float:
    """Max relative error between taped and central-difference gradients.

    The op output is contracted with a fixed random weight so that every
    output coordinate contributes. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if op_kind not in _OPS:
        raise UnsupportedOp(op_kind)
    shapes = [tuple(s) for s in (input_shapes or _default_shapes(op_kind))]
    rng = np.random.default_rng(seed)
    for _ in range(100):
        inputs, case_attrs = _default_case(op_kind, shapes, rng)
        if not _near_kink(op_kind, inputs):
            break
    else:
        raise KinkUnavoidable(f"{op_kind}: every draw landed near a kink")
    case_attrs.update(attrs or {})
    fwd = _OPS[op_kind][0]
    out0, _ = fwd(inputs, case_attrs)
    weight = rng.standard_normal(out0.shape)

    def objective(arrays):
        return float(np.sum(fwd(arrays, case_attrs)[0] * weight))

    with Tape() as tape:
        leaves = [tape.leaf(a) for a in inputs]
        loss = total(forward(op_kind, leaves, case_attrs) * weight)
    analytic = tape.gradients(loss, leaves)

    worst = 0.0
    for i, base in enumerate(inputs):
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[i][idx] += h
            minus[i][idx] -= h
            numeric = (objective(plus) - objective(minus)) / (2 * h)
            a = analytic[i][idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, in place, for every parameter in ``grads``.

    Parameters missing from ``grads`` are untouched, which is how frozen
    sub-networks stay bit-identical.
    """
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeMismatch(f"{name}: param {params[name].shape} vs grad {g.shape}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
