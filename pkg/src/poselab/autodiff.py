"""Dense float64 tensors with reverse-mode differentiation and Adam/AdamW.

Graphs are define-by-run: each forward() call appends a node that caches its
output, inputs always have smaller ids than the node they feed, and backward
walks ids in strictly decreasing order. A tensor is a C-contiguous float64
ndarray; scalars are tensors of size 1. Every op output is checked finite.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

OP_KINDS = (
    "matmul", "add", "relu", "concat", "slice", "mul", "smul",
    "sum", "mean", "l2norm", "l1loss", "exp", "neg", "unit",
)

# Inputs with a norm below this are treated as zero by l2norm (subgradient 0)
# and rejected by unit-normalization.
NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


def as_tensor(value) -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 array (scalars become (1,))."""
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.isfinite(arr).all():
        raise NonFiniteError("tensor holds non-finite values")
    return arr


def _conform_shapes(kind: str, sa: tuple, sb: tuple) -> tuple:
    """Broadcast result shape for elementwise two-input ops."""
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {sa} and {sb} do not conform") from None
    return out


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


@dataclass
class Node:
    kind: str                # op kind, or "param"/"const" for leaves
    inputs: tuple
    value: np.ndarray
    aux: tuple = ()


class Graph:
    """Append-only computation graph over float64 tensors."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_ids: list[int] = []

    # -- leaves ------------------------------------------------------------

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def constant(self, value) -> int:
        return self._append(Node("const", (), as_tensor(value)))

    def param(self, value) -> int:
        nid = self._append(Node("param", (), as_tensor(value)))
        self.param_ids.append(nid)
        return nid

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    # -- forward -----------------------------------------------------------

    def forward(self, kind: str, inputs: Sequence[int], **aux) -> int:
        """Append an op node; validates shapes and caches the output tensor."""
        if kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {kind!r}")
        ids = tuple(int(i) for i in inputs)
        vals = [self.nodes[i].value for i in ids]
        out, packed_aux = _FORWARD[kind](vals, aux)
        if not np.isfinite(out).all():
            raise NonFiniteError(f"op {kind!r} produced non-finite values")
        return self._append(Node(kind, ids, np.ascontiguousarray(out), packed_aux))

    # Convenience wrappers; thin, so call sites read like math.
    def matmul(self, a, b):
        return self.forward("matmul", (a, b))

    def add(self, a, b):
        return self.forward("add", (a, b))

    def sub(self, a, b):
        return self.forward("add", (a, self.forward("neg", (b,))))

    def relu(self, a):
        return self.forward("relu", (a,))

    def concat(self, ids, axis=0):
        return self.forward("concat", ids, axis=axis)

    def slice_rows(self, a, start, stop):
        return self.forward("slice", (a,), start=start, stop=stop)

    def mul(self, a, b):
        return self.forward("mul", (a, b))

    def smul(self, a, factor):
        return self.forward("smul", (a,), factor=factor)

    def sum(self, a):
        return self.forward("sum", (a,))

    def mean(self, a):
        return self.forward("mean", (a,))

    def l2norm(self, a):
        return self.forward("l2norm", (a,))

    def l1loss(self, a, b):
        return self.forward("l1loss", (a, b))

    def exp(self, a):
        return self.forward("exp", (a,))

    def neg(self, a):
        return self.forward("neg", (a,))

    def unit(self, a):
        return self.forward("unit", (a,))

    # -- backward ----------------------------------------------------------

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Gradients of a scalar loss node for every parameter node."""
        loss_val = self.nodes[loss].value
        if loss_val.size != 1:
            raise ShapeError(f"loss must be scalar-shaped, got {loss_val.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss] = np.ones_like(loss_val)
        for nid in range(loss, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.kind in ("param", "const"):
                continue
            in_vals = [self.nodes[i].value for i in node.inputs]
            for iid, ig in zip(node.inputs, _BACKWARD[node.kind](g, node, in_vals)):
                if ig is None:
                    continue
                if grads[iid] is None:
                    grads[iid] = ig.copy()
                else:
                    grads[iid] += ig
        out = {}
        for pid in self.param_ids:
            g = grads[pid]
            out[pid] = np.zeros_like(self.nodes[pid].value) if g is None else g
        return out


# -- op implementations ----------------------------------------------------

def _fwd_matmul(vals, aux):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return a @ b, ()


def _fwd_add(vals, aux):
    a, b = vals
    _conform_shapes("add", a.shape, b.shape)
    return a + b, ()


def _fwd_relu(vals, aux):
    return np.maximum(vals[0], 0.0), ()


def _fwd_concat(vals, aux):
    axis = int(aux.get("axis", 0))
    ndim = vals[0].ndim
    for v in vals[1:]:
        if v.ndim != ndim:
            raise ShapeError(
                f"concat: ranks differ ({vals[0].shape} vs {v.shape})")
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[v.shape for v in vals]} do not conform "
            f"on axis {axis}") from None
    return out, (axis, tuple(v.shape[axis] for v in vals))


def _fwd_slice(vals, aux):
    (a,) = vals
    start, stop = int(aux["start"]), int(aux["stop"])
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"slice: rows [{start}:{stop}] out of range for {a.shape}")
    return a[start:stop], (start, stop)


def _fwd_mul(vals, aux):
    a, b = vals
    _conform_shapes("mul", a.shape, b.shape)
    return a * b, ()


def _fwd_smul(vals, aux):
    c = float(aux["factor"])
    if not np.isfinite(c):
        raise NonFiniteError("smul: non-finite factor")
    return vals[0] * c, (c,)


def _fwd_sum(vals, aux):
    return np.array([vals[0].sum()]), ()


def _fwd_mean(vals, aux):
    return np.array([vals[0].mean()]), ()


def _fwd_l2norm(vals, aux):
    return np.array([np.linalg.norm(vals[0].ravel())]), ()


def _fwd_l1loss(vals, aux):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"l1loss: shapes {a.shape} and {b.shape} differ")
    return np.array([np.abs(a - b).mean()]), ()


def _fwd_exp(vals, aux):
    return np.exp(vals[0]), ()


def _fwd_neg(vals, aux):
    return -vals[0], ()


def _fwd_unit(vals, aux):
    n = np.linalg.norm(vals[0].ravel())
    if n < NORM_FLOOR:
        raise NonFiniteError(f"unit: input norm {n} below {NORM_FLOOR}")
    return vals[0] / n, ()


_FORWARD = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "relu": _fwd_relu,
    "concat": _fwd_concat,
    "slice": _fwd_slice,
    "mul": _fwd_mul,
    "smul": _fwd_smul,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "l2norm": _fwd_l2norm,
    "l1loss": _fwd_l1loss,
    "exp": _fwd_exp,
    "neg": _fwd_neg,
    "unit": _fwd_unit,
}


def _bwd_matmul(g, node, vals):
    a, b = vals
    return g @ b.T, a.T @ g


def _bwd_add(g, node, vals):
    a, b = vals
    return _reduce_to(g, a.shape), _reduce_to(g, b.shape)


def _bwd_relu(g, node, vals):
    return (g * (vals[0] > 0.0),)


def _bwd_concat(g, node, vals):
    axis, sizes = node.aux
    outs = []
    offset = 0
    for size in sizes:
        index = [slice(None)] * g.ndim
        index[axis] = slice(offset, offset + size)
        outs.append(np.ascontiguousarray(g[tuple(index)]))
        offset += size
    return tuple(outs)


def _bwd_slice(g, node, vals):
    start, stop = node.aux
    out = np.zeros_like(vals[0])
    out[start:stop] = g
    return (out,)


def _bwd_mul(g, node, vals):
    a, b = vals
    return _reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape)


def _bwd_smul(g, node, vals):
    return (g * node.aux[0],)


def _bwd_sum(g, node, vals):
    return (np.full_like(vals[0], float(g[0])),)


def _bwd_mean(g, node, vals):
    return (np.full_like(vals[0], float(g[0]) / vals[0].size),)


def _bwd_l2norm(g, node, vals):
    n = float(node.value[0])
    if n < NORM_FLOOR:
        # Subgradient at zero is defined as the zero vector.
        return (np.zeros_like(vals[0]),)
    return (float(g[0]) * vals[0] / n,)


def _bwd_l1loss(g, node, vals):
    a, b = vals
    s = np.sign(a - b) * (float(g[0]) / a.size)
    return s, -s


def _bwd_exp(g, node, vals):
    return (g * node.value,)


def _bwd_neg(g, node, vals):
    return (-g,)


def _bwd_unit(g, node, vals):
    n = float(np.linalg.norm(vals[0].ravel()))
    y = node.value
    return ((g - (g.ravel() @ y.ravel()) * y) / n,)


_BACKWARD = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "relu": _bwd_relu,
    "concat": _bwd_concat,
    "slice": _bwd_slice,
    "mul": _bwd_mul,
    "smul": _bwd_smul,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "l2norm": _bwd_l2norm,
    "l1loss": _bwd_l1loss,
    "exp": _bwd_exp,
    "neg": _bwd_neg,
    "unit": _bwd_unit,
}


# -- optimizers --------------------------------------------------------------

@dataclass
class OptimState:
    """Adam/AdamW state; moment shapes always match the parameter shapes."""
    kind: str
    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step_count: int
    m: list
    v: list


def make_optim(kind: str, params: Sequence[np.ndarray], lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-10,
               weight_decay: float = 0.0) -> OptimState:
    if kind not in ("adam", "adamw"):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    if kind == "adam" and weight_decay != 0.0:
        raise ValueError("adam does not apply weight decay; use adamw")
    return OptimState(kind, lr, beta1, beta2, eps, weight_decay, 0,
                      [np.zeros_like(p) for p in params],
                      [np.zeros_like(p) for p in params])


def step(state: OptimState, params: Sequence[np.ndarray],
         grads: Sequence[np.ndarray], names: Sequence[str] | None = None
         ) -> list[np.ndarray]:
    """One bias-corrected optimizer step; returns fresh parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("step: parameter/gradient/state counts differ")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(
                f"step: param {_pname(names, i)} shape {p.shape} vs grad {g.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"step: non-finite gradient for {_pname(names, i)}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        update = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        new = p - update
        if state.kind == "adamw":
            new = new - state.lr * state.weight_decay * p
        out.append(new)
    return out


def _pname(names, i):
    return names[i] if names else f"#{i}"


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    per_param: dict


def grad_check(build_loss: Callable[[Graph, list[int]], int],
               params: Sequence[np.ndarray], fd_step: float = 1e-5,
               names: Sequence[str] | None = None) -> GradCheckResult:
    """Compare reverse-mode gradients against central finite differences.

    build_loss receives a fresh Graph plus the parameter node ids and must
    return a scalar loss node. The finite-difference side re-evaluates the
    same builder with perturbed parameter values, so it is independent of the
    backward pass it checks. Relative error is per parameter tensor:
    |ad - fd| / (|ad| + |fd| + 1e-6) in the 2-norm.
    """
    params = [as_tensor(p) for p in params]
    g = Graph()
    pids = [g.param(p) for p in params]
    grads = g.backward(build_loss(g, pids))
    ad = [grads[pid] for pid in pids]

    def eval_loss(values):
        gg = Graph()
        ids = [gg.param(v) for v in values]
        return float(gg.value(build_loss(gg, ids)).ravel()[0])

    per_param = {}
    worst = ("", -1.0)
    for k, p in enumerate(params):
        fd = np.zeros_like(p)
        flat = fd.ravel()
        for j in range(p.size):
            hi = [q.copy() for q in params]
            lo = [q.copy() for q in params]
            hi[k].ravel()[j] += fd_step
            lo[k].ravel()[j] -= fd_step
            flat[j] = (eval_loss(hi) - eval_loss(lo)) / (2.0 * fd_step)
        na, nf = np.linalg.norm(ad[k]), np.linalg.norm(fd)
        rel = float(np.linalg.norm(ad[k] - fd) / (na + nf + 1e-6))
        name = _pname(names, k)
        per_param[name] = rel
        if rel > worst[1]:
            worst = (name, rel)
    return GradCheckResult(worst[1], worst[0], per_param)
