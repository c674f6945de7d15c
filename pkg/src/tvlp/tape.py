"""Minimal reverse-mode autodiff engine on a linear tape.

Every value is a numpy array (scalars are 0-d arrays) living on a single
:class:`Tape`.  Operations are recorded eagerly: ``record`` computes the
forward value immediately and appends a :class:`Node`.  The tape is a flat
list in topological order, so :meth:`Tape.backward` is a single reverse
sweep that accumulates vector-Jacobian products into per-node adjoint
buffers.

The op set is deliberately small: generic elementwise/reduction ops live
here, domain ops (LP filters, oscillators, STFT, ...) register themselves
from their own modules via :func:`register_op`.

This is not a general autodiff framework: no broadcasting, no higher-order
derivatives, no graph serialization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tape",
    "Node",
    "NumericalError",
    "register_op",
    "clip_grad_norm",
    "AdamState",
    "adam_step",
]


class NumericalError(ArithmeticError):
    """A numerical guard tripped (NaN/Inf where finite values are required)."""


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

class _Op:
    __slots__ = ("name", "forward", "vjp")

    def __init__(self, name, forward, vjp):
        self.name = name
        self.forward = forward
        self.vjp = vjp


_REGISTRY: dict[str, _Op] = {}


def register_op(name, forward, vjp):
    """Register an operation.

    ``forward(values, ctx, dtype) -> ndarray`` computes the result from the
    input arrays; it may stash whatever its backward rule needs into ``ctx``.
    ``vjp(grad, values, out, ctx) -> tuple`` returns one cotangent per input
    (``None`` for non-differentiable inputs) and must read only ``ctx``, the
    input values, the saved output and the incoming adjoint.
    """
    if name in _REGISTRY:
        raise ValueError(f"op {name!r} already registered")
    _REGISTRY[name] = _Op(name, forward, vjp)


class Node:
    """One recorded operation (or a leaf) and its forward value."""

    __slots__ = ("tape", "idx", "op", "inputs", "value", "ctx", "adjoint")

    def __init__(self, tape, idx, op, inputs, value, ctx):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx
        self.adjoint = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.idx}:{self.op}, shape={self.value.shape})"


class Tape:
    """Ordered record of operations; single-owner, not thread-shared.

    Parameters
    ----------
    dtype : numpy dtype
        Working precision of every node value and adjoint.  Use float64 for
        gradient checking, float32 for production synthesis.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self._backward_done = False

    # -- construction ------------------------------------------------------

    def leaf(self, value) -> Node:
        """Add an input node holding ``value`` (cast to the tape dtype)."""
        arr = np.asarray(value, dtype=self.dtype)
        node = Node(self, len(self.nodes), "leaf", (), arr, None)
        self.nodes.append(node)
        return node

    def record(self, op_name, *inputs, **ctx) -> Node:
        """Record ``op_name`` applied to ``inputs``; the value is computed now.

        Raises ``ValueError`` on unknown ops, inputs from another tape, or
        shape mismatches detected by the op's forward function.
        """
        op = _REGISTRY.get(op_name)
        if op is None:
            raise ValueError(f"unknown op {op_name!r}")
        for inp in inputs:
            if not isinstance(inp, Node) or inp.tape is not self:
                raise ValueError(f"op {op_name!r}: inputs must be nodes on this tape")
        values = [inp.value for inp in inputs]
        out = op.forward(values, ctx, self.dtype)
        out = np.asarray(out, dtype=self.dtype)
        node = Node(self, len(self.nodes), op_name, tuple(inputs), out, ctx)
        self.nodes.append(node)
        return node

    # -- backward ----------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Accumulate adjoints of every node reachable from ``loss``.

        ``loss`` must be scalar.  Adjoint buffers must be explicitly cleared
        with :meth:`zero_adjoints` before a second pass; silent reuse raises.
        """
        if not isinstance(loss, Node) or loss.tape is not self:
            raise ValueError("loss is not a node on this tape")
        if loss.value.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
        if self._backward_done:
            raise RuntimeError("backward already ran on this tape; call zero_adjoints() first")
        self._backward_done = True
        loss.adjoint = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.idx + 1]):
            if node.adjoint is None or node.op == "leaf":
                continue
            grads = _REGISTRY[node.op].vjp(
                node.adjoint, [inp.value for inp in node.inputs], node.value, node.ctx
            )
            for inp, g in zip(node.inputs, grads):
                if g is None:
                    continue
                g = np.asarray(g, dtype=self.dtype)
                if inp.adjoint is None:
                    inp.adjoint = np.zeros_like(inp.value)
                inp.adjoint += g

    def zero_adjoints(self) -> None:
        """Clear all adjoint buffers and re-arm :meth:`backward`."""
        for node in self.nodes:
            node.adjoint = None
        self._backward_done = False

    def grad(self, node: Node) -> np.ndarray:
        """Adjoint of ``node`` after backward (zeros if it was unreachable)."""
        if node.adjoint is None:
            return np.zeros_like(node.value)
        return node.adjoint

    # -- convenience wrappers ------------------------------------------------

    def add(self, a, b):
        return self.record("add", a, b)

    def sub(self, a, b):
        return self.record("sub", a, b)

    def mul(self, a, b):
        return self.record("mul", a, b)

    def neg(self, a):
        return self.record("neg", a)

    def scale(self, a, c):
        return self.record("scale", a, c=float(c))

    def add_const(self, a, c):
        return self.record("add_const", a, c=c)

    def sub_const(self, a, c):
        return self.record("sub_const", a, c=c)

    def exp(self, a):
        return self.record("exp", a)

    def log(self, a):
        return self.record("log", a)

    def tanh(self, a):
        return self.record("tanh", a)

    def sigmoid(self, a):
        return self.record("sigmoid", a)

    def abs(self, a):
        return self.record("abs", a)

    def sum(self, a):
        return self.record("sum", a)

    def mean(self, a):
        return self.record("mean", a)

    def norm2(self, a):
        return self.record("norm2", a)

    def dot(self, a, b):
        return self.record("dot", a, b)


# ---------------------------------------------------------------------------
# generic ops
# ---------------------------------------------------------------------------

def _same_shape(values, name):
    a, b = values
    if a.shape != b.shape:
        raise ValueError(f"op {name!r}: shape mismatch {a.shape} vs {b.shape}")


def _fw_add(values, ctx, dtype):
    _same_shape(values, "add")
    return values[0] + values[1]


def _fw_sub(values, ctx, dtype):
    _same_shape(values, "sub")
    return values[0] - values[1]


def _fw_mul(values, ctx, dtype):
    _same_shape(values, "mul")
    return values[0] * values[1]


register_op("add", _fw_add, lambda g, v, o, c: (g, g))
register_op("sub", _fw_sub, lambda g, v, o, c: (g, -g))
register_op("mul", _fw_mul, lambda g, v, o, c: (g * v[1], g * v[0]))
register_op("neg", lambda v, c, d: -v[0], lambda g, v, o, c: (-g,))
register_op("scale", lambda v, c, d: v[0] * d.type(c["c"]),
            lambda g, v, o, c: (g * c["c"],))
register_op("add_const", lambda v, c, d: v[0] + np.asarray(c["c"], dtype=d),
            lambda g, v, o, c: (g,))
register_op("sub_const", lambda v, c, d: v[0] - np.asarray(c["c"], dtype=d),
            lambda g, v, o, c: (g,))
register_op("exp", lambda v, c, d: np.exp(v[0]), lambda g, v, o, c: (g * o,))
register_op("tanh", lambda v, c, d: np.tanh(v[0]),
            lambda g, v, o, c: (g * (1.0 - o * o),))
register_op("abs", lambda v, c, d: np.abs(v[0]),
            lambda g, v, o, c: (g * np.sign(v[0]),))
register_op("sum", lambda v, c, d: np.sum(v[0]),
            lambda g, v, o, c: (np.full(v[0].shape, g, dtype=v[0].dtype),))
register_op("mean", lambda v, c, d: np.mean(v[0]),
            lambda g, v, o, c: (np.full(v[0].shape, g / v[0].size, dtype=v[0].dtype),))


def _fw_log(values, ctx, dtype):
    x = values[0]
    if np.any(x <= 0):
        raise ValueError("op 'log': requires strictly positive input")
    return np.log(x)


register_op("log", _fw_log, lambda g, v, o, c: (g / v[0],))


def _fw_sigmoid(values, ctx, dtype):
    x = values[0]
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


register_op("sigmoid", _fw_sigmoid, lambda g, v, o, c: (g * o * (1.0 - o),))


def _vjp_norm2(g, values, out, ctx):
    n = float(out)
    if n == 0.0:
        return (np.zeros_like(values[0]),)
    return (values[0] * (g / n),)


register_op("norm2", lambda v, c, d: np.sqrt(np.sum(v[0] * v[0])), _vjp_norm2)


def _fw_dot(values, ctx, dtype):
    _same_shape(values, "dot")
    return np.sum(values[0] * values[1])


register_op("dot", _fw_dot, lambda g, v, o, c: (g * v[1], g * v[0]))


# ---------------------------------------------------------------------------
# optimizer utilities
# ---------------------------------------------------------------------------

def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.  Raises :class:`NumericalError` if any
    gradient is NaN/Inf (the optimization pass must be aborted, not clipped).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads:
        s = float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
        if not np.isfinite(s):
            raise NumericalError("non-finite gradient encountered in clip_grad_norm")
        total += s
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


@dataclass
class AdamState:
    """Per-parameter Adam moment accumulators plus hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def init(cls, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params/grads/state length mismatch")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
