"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op set is deliberately small: exactly what fully-connected sinusoidal
networks and their training losses need. A fresh Tape is built on every
forward pass (define-by-run); node order is creation order, which is already
topological, so the backward sweep is a single reverse walk.

Non-finite values never propagate: every primitive checks its output and
raises FloatingPointError at the op that produced the bad value.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(FloatingPointError):
    """An op produced a NaN or infinity."""


def _op(fn):
    # Overflow surfaces as NonFiniteError from the output check, not as a warning.
    @functools.wraps(fn)
    def wrapped(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)
    return wrapped


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"op '{op}' produced a non-finite value")


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    needs_grad: bool
    ctx: tuple = ()


class Tensor:
    """Handle to one tape node. Cheap to copy; all state lives on the tape."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(nid={self.nid}, shape={self.shape})"


class Tape:
    """Wengert list of primitive ops recorded during one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, op: str, inputs: tuple[int, ...], value: np.ndarray,
              needs_grad: bool, ctx: tuple = ()) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        _check_finite(op, value)
        self.nodes.append(Node(op, inputs, value, needs_grad, ctx))
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value: np.ndarray) -> Tensor:
        """Differentiable input (weights, biases, probe inputs)."""
        return self._push("leaf", (), value, True)

    def const(self, value: np.ndarray) -> Tensor:
        """Non-differentiable input (data batches, fixed kernels)."""
        return self._push("const", (), value, False)


def _needs(*ts: Tensor) -> bool:
    return any(t.tape.nodes[t.nid].needs_grad for t in ts)


def _same_tape(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    assert all(t.tape is tape for t in ts), "operands recorded on different tapes"
    return tape


@_op
def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    return tape._push("matmul", (a.nid, b.nid), a.data @ b.data, _needs(a, b))


@_op
def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also broadcasts a trailing bias (n,) over (m, n)."""
    tape = _same_tape(a, b)
    return tape._push("add", (a.nid, b.nid), a.data + b.data, _needs(a, b))


@_op
def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    return tape._push("sub", (a.nid, b.nid), a.data - b.data, _needs(a, b))


@_op
def scale(a: Tensor, c: float) -> Tensor:
    return a.tape._push("scale", (a.nid,), a.data * float(c), _needs(a), (float(c),))


@_op
def sin(a: Tensor) -> Tensor:
    return a.tape._push("sin", (a.nid,), np.sin(a.data), _needs(a))


@_op
def absval(a: Tensor) -> Tensor:
    # Subgradient at 0 is taken as 0 (sign(0) == 0).
    return a.tape._push("abs", (a.nid,), np.abs(a.data), _needs(a))


@_op
def square(a: Tensor) -> Tensor:
    return a.tape._push("square", (a.nid,), a.data * a.data, _needs(a))


@_op
def reduce_sum(a: Tensor) -> Tensor:
    return a.tape._push("sum", (a.nid,), np.sum(a.data), _needs(a))


@_op
def reduce_mean(a: Tensor) -> Tensor:
    return a.tape._push("mean", (a.nid,), np.mean(a.data), _needs(a))


@_op
def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return a.tape._push("reshape", (a.nid,), a.data.reshape(shape), _needs(a))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Reduce a broadcast gradient back to the operand's shape.
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss node.

    Returns adjoints keyed by node id; look up leaves by their Tensor.nid.
    """
    tape = loss.tape
    nodes = tape.nodes
    if nodes[loss.nid].value.size != 1:
        raise ValueError("backward requires a scalar loss node")

    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[loss.nid] = np.ones_like(nodes[loss.nid].value)

    def _acc(nid: int, g: np.ndarray) -> None:
        # Accumulation always rebinds; stored arrays are never mutated.
        if not nodes[nid].needs_grad:
            return
        grads[nid] = g if grads[nid] is None else grads[nid] + g

    for nid in range(loss.nid, -1, -1):
        node = nodes[nid]
        g = grads[nid]
        if g is None or not node.needs_grad:
            continue
        op = node.op
        if op in ("leaf", "const"):
            continue
        ia = node.inputs[0]
        va = nodes[ia].value
        if op == "matmul":
            ib = node.inputs[1]
            vb = nodes[ib].value
            _acc(ia, g @ vb.T)
            _acc(ib, va.T @ g)
        elif op == "add":
            ib = node.inputs[1]
            _acc(ia, _unbroadcast(g, va.shape))
            _acc(ib, _unbroadcast(g, nodes[ib].value.shape))
        elif op == "sub":
            ib = node.inputs[1]
            _acc(ia, _unbroadcast(g, va.shape))
            _acc(ib, _unbroadcast(-g, nodes[ib].value.shape))
        elif op == "scale":
            _acc(ia, g * node.ctx[0])
        elif op == "sin":
            _acc(ia, g * np.cos(va))
        elif op == "abs":
            _acc(ia, g * np.sign(va))
        elif op == "square":
            _acc(ia, g * 2.0 * va)
        elif op in ("sum", "mean"):
            factor = 1.0 if op == "sum" else 1.0 / va.size
            _acc(ia, np.broadcast_to(g * factor, va.shape))
        elif op == "reshape":
            _acc(ia, g.reshape(va.shape))
        else:  # pragma: no cover
            raise AssertionError(f"no backward rule for op '{op}'")

    return {i: g for i, g in enumerate(grads) if g is not None and nodes[i].op == "leaf"}


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter list."""

    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> list[np.ndarray]:
    """One Adam update with bias correction. Returns new parameter arrays.

    State is mutated in place; parameter arrays are not.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter/gradient/state lengths disagree")
    state.step += 1
    t = state.step
    out = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        _check_finite("adam_step", g)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out
