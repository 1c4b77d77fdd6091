"""A small reverse-mode tape over numpy arrays.

Only the primitives needed to unroll Sinkhorn and IBP are provided. Each node
stores its op, input node ids and forward value; ``backward`` sweeps nodes in
exact reverse order and ``replay`` recomputes every value from the leaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LogKernel, flush_exp, kernel_matmul


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Op:
    name = "op"

    def forward(self, *vals, **params):
        raise NotImplementedError

    def vjp(self, g, out, vals, **params):
        raise NotImplementedError


class Add(Op):
    name = "add"

    def forward(self, x, y):
        return x + y

    def vjp(self, g, out, vals):
        x, y = vals
        return _unbroadcast(g, np.shape(x)), _unbroadcast(g, np.shape(y))


class Sub(Op):
    name = "sub"

    def forward(self, x, y):
        return x - y

    def vjp(self, g, out, vals):
        x, y = vals
        return _unbroadcast(g, np.shape(x)), _unbroadcast(-g, np.shape(y))


class Mul(Op):
    name = "mul"

    def forward(self, x, y):
        return x * y

    def vjp(self, g, out, vals):
        x, y = vals
        return _unbroadcast(g * y, np.shape(x)), _unbroadcast(g * x, np.shape(y))


class Div(Op):
    name = "div"

    def forward(self, x, y):
        return x / y

    def vjp(self, g, out, vals):
        x, y = vals
        gx = g / y
        return _unbroadcast(gx, np.shape(x)), _unbroadcast(-gx * out, np.shape(y))


class Exp(Op):
    name = "exp"

    def forward(self, x):
        return np.exp(x)

    def vjp(self, g, out, vals):
        return (g * out,)


class Log(Op):
    """log(max(x, floor)); the floor is a constant with zero derivative."""

    name = "log"

    def forward(self, x, floor=0.0):
        return np.log(np.maximum(x, floor)) if floor > 0 else np.log(x)

    def vjp(self, g, out, vals, floor=0.0):
        (x,) = vals
        gx = g / np.maximum(x, floor) if floor > 0 else g / x
        if floor > 0:
            gx = np.where(x >= floor, gx, 0.0)
        return (gx,)


class Sum(Op):
    name = "sum"

    def forward(self, x, axis=None, keepdims=False):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def vjp(self, g, out, vals, axis=None, keepdims=False):
        (x,) = vals
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, np.shape(x)).copy(),)


class Einsum(Op):
    """Two-operand einsum whose input indices all appear in the other operand or output."""

    name = "einsum"

    def forward(self, x, y, spec):
        return np.einsum(spec, x, y)

    def vjp(self, g, out, vals, spec):
        x, y = vals
        ins, o = spec.split("->")
        sx, sy = ins.split(",")
        return np.einsum(f"{o},{sy}->{sx}", g, y), np.einsum(f"{sx},{o}->{sy}", x, g)


class Reshape(Op):
    name = "reshape"

    def forward(self, x, shape):
        return np.reshape(x, shape)

    def vjp(self, g, out, vals, shape):
        return (np.reshape(g, np.shape(vals[0])),)


class LogSoftmax(Op):
    name = "log_softmax"

    def forward(self, x):
        z = x - np.max(x, axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(self, g, out, vals):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


class Softmax(Op):
    name = "softmax"

    def forward(self, x):
        z = np.exp(x - np.max(x, axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def vjp(self, g, out, vals):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


class KernelLSE(Op):
    """y_i = log sum_j K_ij exp(x_j) along the last axis (kernel entries > 0)."""

    name = "kernel_lse"

    def forward(self, x, kernel):
        if isinstance(kernel, LogKernel):
            return kernel.T.logmatmul(x)
        shift = np.max(x, axis=-1, keepdims=True)
        return np.log(kernel_matmul(flush_exp(x - shift), kernel.T)) + shift

    def vjp(self, g, out, vals, kernel):
        (x,) = vals
        if isinstance(kernel, LogKernel):
            return (kernel.T.logmatmul_vjp(x, g),)
        # K_ij e^{x_j} / e^{y_i}, shifted by the row max of x for range safety
        shift = np.max(x, axis=-1, keepdims=True)
        e = flush_exp(x - shift)
        return (e * kernel_matmul(g * np.exp(shift - out), kernel),)


class BilinearExp(Op):
    """y = sum_ij exp(p_i) M_ij exp(q_j) along the last axis."""

    name = "bilinear_exp"

    def forward(self, p, q, matrix):
        shift = np.max(q, axis=-1, keepdims=True)
        s = flush_exp(q - shift) @ matrix.T
        return np.sum(flush_exp(p + shift) * s, axis=-1)

    def vjp(self, g, out, vals, matrix):
        p, q = vals
        shift = np.max(q, axis=-1, keepdims=True)
        eq = flush_exp(q - shift)
        ep = flush_exp(p + shift) * g[..., None]
        gp = ep * (eq @ matrix.T)
        gq = eq * (ep @ matrix)
        return _unbroadcast(gp, np.shape(p)), _unbroadcast(gq, np.shape(q))


class LogBilinearExp(Op):
    """y = sum_ij exp(p_i + L_ij + q_j) W_ij along the last axis."""

    name = "log_bilinear_exp"

    @staticmethod
    def _terms(p, q, log_matrix, weights):
        e = np.exp(p[..., :, None] + log_matrix + q[..., None, :])
        return e if weights is None else e * weights

    def forward(self, p, q, log_matrix, weights):
        return np.sum(self._terms(p, q, log_matrix, weights), axis=(-2, -1))

    def vjp(self, g, out, vals, log_matrix, weights):
        p, q = vals
        t = self._terms(p, q, log_matrix, weights) * np.asarray(g)[..., None, None]
        return _unbroadcast(t.sum(axis=-1), np.shape(p)), _unbroadcast(t.sum(axis=-2), np.shape(q))


_ADD, _SUB, _MUL, _DIV = Add(), Sub(), Mul(), Div()
_EXP, _LOG, _SUM = Exp(), Log(), Sum()
_EINSUM, _LOGSOFTMAX, _SOFTMAX = Einsum(), LogSoftmax(), Softmax()
_KLSE, _BILIN, _RESHAPE = KernelLSE(), BilinearExp(), Reshape()
_LOGBILIN = LogBilinearExp()


@dataclass
class Node:
    op: Op | None
    inputs: tuple
    params: dict
    value: object
    needs_grad: bool


class Var:
    __slots__ = ("tape", "idx")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return np.shape(self.value)

    def _bin(self, op, other, reverse=False):
        other = other if isinstance(other, Var) else self.tape.const(other)
        a, b = (other, self) if reverse else (self, other)
        return self.tape.apply(op, a, b)

    def __add__(self, o):
        return self._bin(_ADD, o)

    def __radd__(self, o):
        return self._bin(_ADD, o, True)

    def __sub__(self, o):
        return self._bin(_SUB, o)

    def __rsub__(self, o):
        return self._bin(_SUB, o, True)

    def __mul__(self, o):
        return self._bin(_MUL, o)

    def __rmul__(self, o):
        return self._bin(_MUL, o, True)

    def __truediv__(self, o):
        return self._bin(_DIV, o)

    def __rtruediv__(self, o):
        return self._bin(_DIV, o, True)

    def __neg__(self):
        return self.tape.const(0.0) - self

    def __repr__(self):
        node = self.tape.nodes[self.idx]
        return f"Var(#{self.idx}, {node.op.name if node.op else 'leaf'}, shape={self.shape})"


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def _push(self, op, inputs, params, value, needs_grad) -> Var:
        self.nodes.append(Node(op, inputs, params, value, needs_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> Var:
        return self._push(None, (), {}, np.array(value, dtype=np.float64), True)

    def const(self, value) -> Var:
        return self._push(None, (), {}, value, False)

    def apply(self, op: Op, *inputs: Var, **params) -> Var:
        vals = [self.nodes[v.idx].value for v in inputs]
        out = op.forward(*vals, **params)
        needs = any(self.nodes[v.idx].needs_grad for v in inputs)
        return self._push(op, tuple(v.idx for v in inputs), params, out, needs)

    def __len__(self):
        return len(self.nodes)

    # convenience wrappers
    def exp(self, x):
        return self.apply(_EXP, x)

    def log(self, x, floor=0.0):
        return self.apply(_LOG, x, floor=floor)

    def sum(self, x, axis=None, keepdims=False):
        return self.apply(_SUM, x, axis=axis, keepdims=keepdims)

    def einsum(self, spec, x, y):
        y = y if isinstance(y, Var) else self.const(y)
        x = x if isinstance(x, Var) else self.const(x)
        return self.apply(_EINSUM, x, y, spec=spec)

    def reshape(self, x, shape):
        return self.apply(_RESHAPE, x, shape=tuple(shape))

    def log_softmax(self, x):
        return self.apply(_LOGSOFTMAX, x)

    def softmax(self, x):
        return self.apply(_SOFTMAX, x)

    def kernel_lse(self, x, kernel):
        return self.apply(_KLSE, x, kernel=kernel)

    def bilinear_exp(self, p, q, matrix):
        return self.apply(_BILIN, p, q, matrix=matrix)

    def log_bilinear_exp(self, p, q, log_matrix, weights=None):
        return self.apply(_LOGBILIN, p, q, log_matrix=log_matrix, weights=weights)

    def backward(self, out: Var, seed=None) -> dict:
        """Adjoints of ``out`` for every node that needs a gradient, keyed by node id."""
        grads: dict = {out.idx: np.ones_like(out.value) if seed is None else seed}
        for idx in range(out.idx, -1, -1):
            node = self.nodes[idx]
            g = grads.get(idx)
            if g is None or node.op is None or not node.needs_grad:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            gins = node.op.vjp(g, node.value, vals, **node.params)
            for i, gi in zip(node.inputs, gins):
                if gi is None or not self.nodes[i].needs_grad:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
            if idx != out.idx:
                del grads[idx]
        return grads

    def grad(self, out: Var, *wrt: Var):
        grads = self.backward(out)
        return tuple(grads.get(v.idx, np.zeros_like(v.value)) for v in wrt)

    def replay(self, out: Var | None = None, leaf_values: dict | None = None):
        """Recompute every node from its inputs; returns ``out``'s value (default: last node)."""
        for idx, node in enumerate(self.nodes):
            if node.op is None:
                if leaf_values and idx in leaf_values:
                    node.value = np.array(leaf_values[idx], dtype=np.float64)
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            node.value = node.op.forward(*vals, **node.params)
        return self.nodes[-1 if out is None else out.idx].value
