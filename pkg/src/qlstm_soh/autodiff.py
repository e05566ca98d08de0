"""Small reverse-mode autodiff over dense numpy arrays.

Every op appends one node to a :class:`Tape`; :func:`backward` walks the
tape in reverse append order.  Tensors carry a leading batch axis where it
is convenient (``(B, d)`` instead of ``(d,)``), and the gated models stack
their four gate blocks on another leading axis ``G``.

The quantum node runs the circuit forward and, on the way back, hands the
upstream gradient to the parameter-shift VJP in :mod:`qlstm_soh.vqc`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import count
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import vqc
from .errors import NonFiniteError, ShapeError, ValidationError

_ids = count()
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "id")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient (or None) per input; the
    # closure holds whatever forward values the rule needs
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op} produced a non-finite value")
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(value, requires_grad=needs)
        if needs:
            self.nodes.append(Node(op, tuple(inputs), out, vjp))
        return out

    def __len__(self):
        return len(self.nodes)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("non-finite input")


# --------------------------------------------------------------------------
# Ops
# --------------------------------------------------------------------------

def affine(tape: Tape, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` over the last axis.

    Shapes: ``x (..., in)``, ``w (out, in)``, ``b (out,)``.  With a block
    axis, ``w (G, out, in)`` and ``b (G, out)`` map ``x (B, in)`` or
    ``x (G, B, in)`` to ``(G, B, out)``.
    """
    xv, wv, bv = x.value, w.value, b.value
    if wv.shape[-1] != xv.shape[-1] or bv.shape != wv.shape[:-1]:
        raise ShapeError(f"affine: x {xv.shape}, W {wv.shape}, b {bv.shape}")
    if wv.ndim == 2:
        y = xv @ wv.T + bv
        blocked = False
    elif wv.ndim == 3:
        if xv.ndim == 3 and xv.shape[0] != wv.shape[0]:
            raise ShapeError(f"affine: block counts differ, x {xv.shape}, W {wv.shape}")
        y = np.matmul(xv, np.swapaxes(wv, -1, -2)) + bv[:, None, :]
        blocked = True
    else:
        raise ShapeError(f"affine: weight must be 2-D or 3-D, got {wv.shape}")

    def vjp(g):
        if not blocked:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = xv.reshape(-1, xv.shape[-1])
            return g @ wv, g2.T @ x2, g2.sum(axis=0)
        dw = np.matmul(np.swapaxes(g, -1, -2), xv if xv.ndim == 3 else xv[None])
        dx = np.matmul(g, wv)
        if xv.ndim == 2:
            dx = dx.sum(axis=0)
        return dx, dw, g.sum(axis=1)

    return tape.record("affine", (x, w, b), y, vjp)


def sigmoid(tape: Tape, x: Tensor) -> Tensor:
    # tanh form is overflow free for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return tape.record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(tape: Tape, x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return tape.record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def gelu(tape: Tape, x: Tensor) -> Tensor:
    """Exact GELU ``x * Phi(x)``."""
    xv = x.value
    cdf = 0.5 * (1.0 + erf(xv * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * xv * xv)
    return tape.record("gelu", (x,), xv * cdf, lambda g: (g * (cdf + xv * pdf),))


def layernorm(tape: Tape, x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xv = x.value
    d = xv.shape[-1]
    if d < 2:
        raise ValidationError("layernorm needs at least 2 features")
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise ShapeError(f"layernorm: x {xv.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value
    gain_b = gv if gv.ndim == 1 else gv[:, None, :]
    bias_b = bias.value if bias.value.ndim == 1 else bias.value[:, None, :]
    y = xhat * gain_b + bias_b

    def vjp(g):
        gh = g * gain_b
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - gv.ndim)) if gv.ndim == 1 else (1,)
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return tape.record("layernorm", (x, gain, bias), y, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return tape.record("add", (a, b), a.value + b.value, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    av, bv = a.value, b.value
    return tape.record(
        "mul", (a, b), av * bv, lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def one_minus(tape: Tape, a: Tensor) -> Tensor:
    return tape.record("one_minus", (a,), 1.0 - a.value, lambda g: (-g,))


def scale(tape: Tape, a: Tensor, factor) -> Tensor:
    """Multiply by a constant array (e.g. a dropout mask); no gradient to ``factor``."""
    factor = np.asarray(factor, dtype=np.float64)
    return tape.record("scale", (a,), a.value * factor, lambda g: (_unbroadcast(g * factor, a.shape),))


def concat(tape: Tape, parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    values = [p.value for p in parts]
    y = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record("concat", tuple(parts), y, vjp)


def take(tape: Tape, a: Tensor, index: int) -> Tensor:
    """Block ``index`` along the leading axis."""
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return tape.record("take", (a,), a.value[index], vjp)


def reshape(tape: Tape, a: Tensor, shape) -> Tensor:
    old = a.shape
    return tape.record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def quantum_node(tape: Tape, config: vqc.VqcConfig, params: Tensor, v: Tensor, seed: int | None = None) -> Tensor:
    """Circuit readout <Z> for raw encoder inputs ``v``.

    ``params`` may be ``(L, n, 3)`` with ``v (B, n)``, or blocked
    ``(G, L, n, 3)`` with ``v (G, B, n)``.  With trajectory noise the same
    ``seed`` is replayed in backward so every shifted circuit sees the
    forward pass's flip pattern.
    """
    pv, vv = params.value, v.value
    _check_finite(vv)

    def rng():
        return None if seed is None else np.random.default_rng(seed)

    z = vqc.vqc_apply(config, pv, vv, rng=rng())

    def vjp(g):
        g_par, g_v = vqc.vqc_input_grad(config, pv, vv, g, rng=rng())
        return g_par, g_v

    return tape.record("quantum", (params, v), z, vjp)


def mse_loss(tape: Tape, pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    pv = pred.value
    if pv.size == 0:
        raise ValidationError("mse_loss needs at least one prediction")
    if pv.size != target.size:
        raise ShapeError(f"mse_loss: pred {pv.shape} vs target {target.shape}")
    resid = pv - target.reshape(pv.shape)
    n = pv.size
    return tape.record("mse", (pred,), np.array(np.mean(resid * resid)), lambda g: (g * 2.0 * resid / n,))


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------

def backward(tape: Tape, root: Tensor, params: Sequence[Tensor] = (), upstream: float = 1.0) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``root`` for every requires-grad tensor on the tape.

    Tensors listed in ``params`` are always present in the result; those
    with no path to ``root`` get exact zeros.
    """
    if root.value.size != 1:
        raise ValidationError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.id: np.full(root.shape, float(upstream))}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = np.asarray(gi, dtype=np.float64)
            leaves.setdefault(t.id, t)
    out = {t: grads[i] for i, t in leaves.items() if i in grads}
    for p in params:
        if p not in out:
            out[p] = np.zeros(p.shape)
    return out
