"""Minimal dense reverse-mode autodiff engine.

Everything is a float64 numpy array wrapped in a :class:`Tensor`. Operations
record a closure computing the local vector-Jacobian product; ``backward`` on a
scalar loss walks the recorded graph once in reverse topological order and
accumulates gradients additively across fan-out. The op set is exactly what the
masked residual GNN forward pass and the variational objective need -- no
general broadcasting, no higher-order derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericDomainError(ValueError):
    """An input lies outside the mathematical domain of the operation."""


class AutodiffStateError(RuntimeError):
    """The computation graph is in an invalid state (e.g. double backward)."""


class Tensor:
    """A value in the computation graph.

    ``grad`` is allocated lazily on the first backward pass and always matches
    the shape of ``value``. Leaf tensors created with ``requires_grad=True``
    are parameters; everything produced by an op tracks gradients iff any
    parent does.
    """

    __slots__ = ("value", "grad", "parents", "_vjp", "requires_grad", "name", "_spent")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        self._spent = False

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def zero_grad(self):
        self.grad = None
        self._spent = False

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name!r})"

    def backward(self):
        """Populate ``grad`` on every reachable tensor that requires one.

        Returns the set of reachable parameter (leaf, requires_grad) tensors,
        which is what the optimizer uses to update only touched parameters.
        Raises :class:`AutodiffStateError` if called twice without reset.
        """
        if self.value.size != 1:
            raise AutodiffStateError(
                f"backward requires a scalar loss, got shape {self.value.shape}"
            )
        if self._spent:
            raise AutodiffStateError("backward called twice on the same graph without reset")
        self._spent = True

        order = _toposort(self)
        for t in order:
            t.grad = None
        self.grad = np.ones_like(self.value)

        touched = set()
        for t in reversed(order):
            if t.grad is None:
                continue
            if not t.parents and t.requires_grad:
                touched.add(t)
            if t._vjp is not None:
                for parent, contrib in t._vjp(t.grad):
                    if not parent.requires_grad:
                        continue
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.value)
                    parent.grad += contrib
        return touched


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad:
                stack.append((p, False))
    return order


def constant(value, name=""):
    return Tensor(value, requires_grad=False, name=name)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericDomainError(f"{op} produced non-finite values")
    return arr


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.value.shape} x {b.value.shape}")
    out = a.value @ b.value

    def vjp(g):
        return ((a, g @ b.value.T), (b, a.value.T @ g))

    return Tensor(out, parents=(a, b), vjp=vjp)


# ---------------------------------------------------------------------------
# elementwise ops


def _same_shape(a, b, op):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op} shape mismatch: {a.value.shape} vs {b.value.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor(a.value + b.value, parents=(a, b), vjp=lambda g: ((a, g), (b, g)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor(a.value - b.value, parents=(a, b), vjp=lambda g: ((a, g), (b, -g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Tensor(
        a.value * b.value,
        parents=(a, b),
        vjp=lambda g: ((a, g * b.value), (b, g * a.value)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    if np.any(b.value == 0.0):
        raise NumericDomainError("div by zero")
    out = a.value / b.value
    return Tensor(
        out,
        parents=(a, b),
        vjp=lambda g: ((a, g / b.value), (b, -g * out / b.value)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.value * c, parents=(a,), vjp=lambda g: ((a, g * c),))


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    return Tensor(a.value + c, parents=(a,), vjp=lambda g: ((a, g),))


def mul_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.shape not in ((), a.value.shape):
        raise DimensionError(f"mul_const shape mismatch: {a.value.shape} vs {c.shape}")
    return Tensor(a.value * c, parents=(a,), vjp=lambda g: ((a, g * c),))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def rsub_const(c: float, a: Tensor) -> Tensor:
    """c - a, elementwise."""
    return Tensor(float(c) - a.value, parents=(a,), vjp=lambda g: ((a, -g),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0
    return Tensor(np.where(mask, a.value, 0.0), parents=(a,), vjp=lambda g: ((a, g * mask),))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.value)
    return Tensor(out, parents=(a,), vjp=lambda g: ((a, g * out * (1.0 - out)),))


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0.0):
        raise NumericDomainError("log of non-positive value")
    return Tensor(np.log(a.value), parents=(a,), vjp=lambda g: ((a, g / a.value),))


def exp(a: Tensor) -> Tensor:
    out = _check_finite(np.exp(a.value), "exp")
    return Tensor(out, parents=(a,), vjp=lambda g: ((a, g * out),))


def log1mexp(a: Tensor) -> Tensor:
    """log(1 - exp(a)) for strictly negative a, stable at both ends."""
    x = a.value
    if np.any(x >= 0.0):
        raise NumericDomainError("log1mexp requires strictly negative arguments")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        # np.where evaluates both branches; the discarded one may warn
        out = np.where(x < -0.693, np.log1p(-np.exp(x)), np.log(-np.expm1(x)))

        def vjp(g):
            # d/dx log(1 - e^x) = -1 / expm1(-x); -> -0.0 as x -> -inf
            with np.errstate(over="ignore"):
                return ((a, g * (-1.0 / np.expm1(-x))),)

    return Tensor(out, parents=(a,), vjp=vjp)


def lgamma(a: Tensor) -> Tensor:
    if np.any(a.value <= 0.0):
        raise NumericDomainError("lgamma restricted to positive arguments")
    out = special.gammaln(a.value)
    return Tensor(out, parents=(a,), vjp=lambda g: ((a, g * special.digamma(a.value)),))


def digamma(a: Tensor) -> Tensor:
    if np.any(a.value <= 0.0):
        raise NumericDomainError("digamma restricted to positive arguments")
    out = special.digamma(a.value)
    return Tensor(out, parents=(a,), vjp=lambda g: ((a, g * special.polygamma(1, a.value)),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with straight-through gradient inside the interval."""
    inside = (a.value >= lo) & (a.value <= hi)
    return Tensor(np.clip(a.value, lo, hi), parents=(a,), vjp=lambda g: ((a, g * inside),))


def tensor_sum(a: Tensor) -> Tensor:
    return Tensor(a.value.sum(), parents=(a,), vjp=lambda g: ((a, np.full_like(a.value, float(g))),))


def cumsum(a: Tensor) -> Tensor:
    """Running sum of a 1-D tensor; backward is the reversed running sum."""
    if a.value.ndim != 1:
        raise DimensionError(f"cumsum expects a vector, got shape {a.value.shape}")
    return Tensor(
        np.cumsum(a.value),
        parents=(a,),
        vjp=lambda g: ((a, np.cumsum(g[::-1])[::-1]),),
    )


def tile_rows(v: Tensor, n_rows: int) -> Tensor:
    """Broadcast a length-k vector to an (n_rows, k) matrix."""
    if v.value.ndim != 1:
        raise DimensionError(f"tile_rows expects a vector, got shape {v.value.shape}")
    out = np.tile(v.value, (n_rows, 1))
    return Tensor(out, parents=(v,), vjp=lambda g: ((v, g.sum(axis=0)),))


def column(a: Tensor, j: int) -> Tensor:
    if a.value.ndim != 2:
        raise DimensionError(f"column expects a matrix, got shape {a.value.shape}")

    def vjp(g):
        full = np.zeros_like(a.value)
        full[:, j] = g
        return ((a, full),)

    return Tensor(a.value[:, j].copy(), parents=(a,), vjp=vjp)


def mask_multiply(h: Tensor, z: Tensor) -> Tensor:
    """Multiply every row of an (N, O) matrix by a length-O mask vector."""
    if h.value.ndim != 2 or z.value.ndim != 1 or h.value.shape[1] != z.value.shape[0]:
        raise DimensionError(f"mask_multiply shape mismatch: {h.value.shape} vs {z.value.shape}")
    return Tensor(
        h.value * z.value[None, :],
        parents=(h, z),
        vjp=lambda g: ((h, g * z.value[None, :]), (z, (g * h.value).sum(axis=0))),
    )


# ---------------------------------------------------------------------------
# loss


def masked_softmax_nll(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log softmax-likelihood over the masked node subset.

    ``labels`` are integer class indices; ``mask`` is an index array of rows to
    score. Stabilized by row-max subtraction.
    """
    mask = np.asarray(mask, dtype=np.intp)
    if mask.size == 0:
        raise ValueError("masked_softmax_nll: empty mask")
    labels = np.asarray(labels, dtype=np.intp)
    n_classes = logits.value.shape[1]
    y = labels[mask]
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError("masked_softmax_nll: label out of range on masked node")

    rows = logits.value[mask]
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -log_probs[np.arange(mask.size), y].mean()

    def vjp(g):
        soft = np.exp(log_probs)
        soft[np.arange(mask.size), y] -= 1.0
        full = np.zeros_like(logits.value)
        full[mask] = soft * (float(g) / mask.size)
        return ((logits, full),)

    return Tensor(loss, parents=(logits,), vjp=vjp)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter Adam accumulators with bias correction."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, touched=None):
    """One Adam update in place.

    ``touched`` restricts the update to parameters reached by the last
    backward pass; untouched parameters keep their values and accumulators.
    """
    state.step_count += 1
    t = state.step_count
    for i, p in enumerate(params):
        if touched is not None and p not in touched:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        if g.shape != p.value.shape:
            raise DimensionError(f"adam_step gradient shape {g.shape} != param {p.value.shape}")
        if i not in state.m:
            state.m[i] = np.zeros_like(p.value)
            state.v[i] = np.zeros_like(p.value)
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        m_hat = state.m[i] / (1 - state.beta1**t)
        v_hat = state.v[i] / (1 - state.beta2**t)
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
