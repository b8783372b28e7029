"""Reverse-mode automatic differentiation over float64 numpy arrays.

A forward pass builds an implicit tape of :class:`Tensor` nodes. Each loss
term (``ce``, ``kd``, ``orth``) is a scalar node on that shared tape, and
:func:`backward_per_term` walks the tape once per term so the gradient of
each loss with respect to every trainable parameter is attributed exactly,
never approximated by differencing combined gradients.

Gradients are only computed along paths that reach a trainable leaf; frozen
parameters participate in the chain rule by value but never receive (or
trigger computation of) a stored gradient.

Shapes follow the convention ``(..., tokens, features)`` with optional
leading batch axes; weight matrices are stored ``(in, out)`` and applied on
the right.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import DeterminismError, GraphError, InvalidInputError

LOSS_TERMS = ("ce", "kd", "orth")

PARAMETER_TAGS = (
    "shared-up",
    "shared-down",
    "specific-up",
    "specific-down",
    "block-weight",
    "head",
    "backbone",
)


@dataclass
class Parameter:
    """A named model weight with a training role tag.

    ``backbone`` weights are frozen by construction; attempting to mark one
    trainable is rejected. ``shared-down`` weights are frozen in the default
    architecture and only become trainable in the explicit ablation that
    replaces the fixed orthogonal down-projection with a learned one.
    """

    name: str
    value: np.ndarray
    trainable: bool
    tag: str

    def __post_init__(self):
        if self.tag not in PARAMETER_TAGS:
            raise InvalidInputError(f"unknown parameter tag {self.tag!r}")
        if self.tag == "backbone" and self.trainable:
            raise InvalidInputError(f"backbone parameter {self.name!r} cannot be trainable")
        self.value = np.ascontiguousarray(np.asarray(self.value, dtype=np.float64))

    @property
    def size(self) -> int:
        return self.value.size

    def byte_hash(self) -> str:
        import hashlib

        return hashlib.sha256(self.value.tobytes()).hexdigest()


class Tensor:
    """One node of the recorded computation."""

    __slots__ = ("value", "parents", "bwd", "requires_grad", "param")

    def __init__(self, value, parents=(), bwd=None, requires_grad=False, param=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.bwd = bwd
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self):
        return self.value.shape


def constant(x) -> Tensor:
    return Tensor(x)


def leaf(param: Parameter) -> Tensor:
    """Enter a parameter onto the tape; gradient flows only if trainable."""
    return Tensor(param.value, requires_grad=param.trainable, param=param)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, bwd) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(value, parents=tuple(parents), bwd=bwd if rg else None, requires_grad=rg)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    va, vb = a.value, b.value

    def bwd(g, needs):
        return (
            _unbroadcast(g, va.shape) if needs[0] else None,
            _unbroadcast(g, vb.shape) if needs[1] else None,
        )

    return _node(va + vb, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    va, vb = a.value, b.value

    def bwd(g, needs):
        return (
            _unbroadcast(g, va.shape) if needs[0] else None,
            -_unbroadcast(g, vb.shape) if needs[1] else None,
        )

    return _node(va - vb, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    va, vb = a.value, b.value

    def bwd(g, needs):
        return (
            _unbroadcast(g * vb, va.shape) if needs[0] else None,
            _unbroadcast(g * va, vb.shape) if needs[1] else None,
        )

    return _node(va * vb, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)

    def bwd(g, needs):
        return (g * c if needs[0] else None,)

    return _node(a.value * c, (a,), bwd)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    """Matrix product; right operand is either a 2-D weight or a batched mate.

    Supports ``(..., n, m) @ (m, p)`` (weight application) and
    ``(..., n, m) @ (..., m, p)`` with identical leading axes (attention).
    """
    a, b = _wrap(a), _wrap(b)
    va, vb = a.value, b.value
    if va.ndim < 2 or vb.ndim < 2:
        raise GraphError(f"matmul needs 2-D operands, got {va.shape} @ {vb.shape}")
    if va.shape[-1] != vb.shape[-2]:
        raise GraphError(f"matmul shape mismatch: {va.shape} @ {vb.shape}")
    if vb.ndim > 2 and va.shape[:-2] != vb.shape[:-2]:
        raise GraphError(f"matmul leading axes differ: {va.shape} @ {vb.shape}")

    if vb.ndim == 2:

        def bwd(g, needs):
            ga = g @ vb.T if needs[0] else None
            gb = None
            if needs[1]:
                gb = va.reshape(-1, va.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return (ga, gb)

    else:

        def bwd(g, needs):
            ga = g @ np.swapaxes(vb, -1, -2) if needs[0] else None
            gb = np.swapaxes(va, -1, -2) @ g if needs[1] else None
            return (ga, gb)

    return _node(va @ vb, (a, b), bwd)


def swap_last2(a) -> Tensor:
    a = _wrap(a)

    def bwd(g, needs):
        return (np.swapaxes(g, -1, -2) if needs[0] else None,)

    return _node(np.swapaxes(a.value, -1, -2), (a,), bwd)


def moveaxis(a, src: int, dst: int) -> Tensor:
    a = _wrap(a)

    def bwd(g, needs):
        return (np.moveaxis(g, dst, src) if needs[0] else None,)

    return _node(np.moveaxis(a.value, src, dst), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.value.shape

    def bwd(g, needs):
        return (g.reshape(old) if needs[0] else None,)

    return _node(a.value.reshape(shape), (a,), bwd)


def take_row(a, idx: int) -> Tensor:
    """Select one row along the token axis: ``(..., n, d) -> (..., d)``."""
    a = _wrap(a)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        out = np.zeros_like(a.value)
        out[..., idx, :] = g
        return (out,)

    return _node(a.value[..., idx, :], (a,), bwd)


def take_index(a, idx: int) -> Tensor:
    """Select one scalar from a 1-D vector."""
    a = _wrap(a)
    if a.value.ndim != 1:
        raise GraphError(f"take_index expects 1-D, got shape {a.shape}")

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        out = np.zeros_like(a.value)
        out[idx] = g
        return (out,)

    return _node(a.value[idx], (a,), bwd)


def gather_labels(a, labels: np.ndarray) -> Tensor:
    """Pick ``a[i, labels[i]]`` from a 2-D array, yielding a 1-D vector."""
    a = _wrap(a)
    if a.value.ndim != 2:
        raise GraphError(f"gather_labels expects 2-D, got shape {a.shape}")
    rows = np.arange(a.value.shape[0])

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        out = np.zeros_like(a.value)
        out[rows, labels] = g
        return (out,)

    return _node(a.value[rows, labels], (a,), bwd)


def sum_all(a) -> Tensor:
    a = _wrap(a)
    shape = a.value.shape

    def bwd(g, needs):
        return (np.broadcast_to(g, shape).copy() if needs[0] else None,)

    return _node(a.value.sum(), (a,), bwd)


def mean_all(a) -> Tensor:
    a = _wrap(a)
    n = a.value.size
    return scale(sum_all(a), 1.0 / n)


def sum_last(a) -> Tensor:
    a = _wrap(a)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        return (np.broadcast_to(g[..., None], a.value.shape).copy(),)

    return _node(a.value.sum(axis=-1), (a,), bwd)


def abs_(a) -> Tensor:
    a = _wrap(a)
    s = np.sign(a.value)

    def bwd(g, needs):
        return (g * s if needs[0] else None,)

    return _node(np.abs(a.value), (a,), bwd)


def softplus(a) -> Tensor:
    a = _wrap(a)
    v = a.value
    out = np.logaddexp(0.0, v)
    sig = 1.0 / (1.0 + np.exp(-v))

    def bwd(g, needs):
        return (g * sig if needs[0] else None,)

    return _node(out, (a,), bwd)


def gelu(a) -> Tensor:
    """Exact Gaussian-error linear unit: x * Phi(x)."""
    a = _wrap(a)
    v = a.value
    phi = 0.5 * (1.0 + erf(v / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * v * v) / np.sqrt(2.0 * np.pi)

    def bwd(g, needs):
        return (g * (phi + v * pdf) if needs[0] else None,)

    return _node(v * phi, (a,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value

    def bwd(g, needs):
        gx = None
        if needs[0]:
            gl = g * gv
            gx = inv * (
                gl
                - gl.mean(axis=-1, keepdims=True)
                - xhat * (gl * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = _unbroadcast(g * xhat, gain.value.shape) if needs[1] else None
        gbias = _unbroadcast(g, bias.value.shape) if needs[2] else None
        return (gx, ggain, gbias)

    return _node(xhat * gv + bias.value, (x, gain, bias), bwd)


def softmax_last(x) -> Tensor:
    x = _wrap(x)
    v = x.value
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), bwd)


def log_softmax_last(x) -> Tensor:
    x = _wrap(x)
    v = x.value
    z = v - v.max(axis=-1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = np.exp(ls)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _node(ls, (x,), bwd)


# ---------------------------------------------------------------------------
# backward traversal and per-term attribution
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    """Post-order over the gradient-carrying subgraph, iteratively."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar node with respect to every trainable parameter.

    Returns a map from parameter name to gradient array. A parameter used at
    several tape positions accumulates across all of them.
    """
    if root.value.shape != ():
        raise GraphError(f"backward needs a scalar root, got shape {root.value.shape}")
    if not root.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(root): np.asarray(1.0)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None:
            if g.shape != node.param.value.shape:
                raise GraphError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{node.param.name!r} of shape {node.param.value.shape}"
                )
            prev = out.get(node.param.name)
            out[node.param.name] = g if prev is None else prev + g
            continue
        if node.bwd is None:
            continue
        needs = tuple(p.requires_grad for p in node.parents)
        pgrads = node.bwd(g, needs)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return out


@dataclass
class GradientBundle:
    """Per-loss-term gradients keyed by parameter name.

    Terms that were not computed this step are simply absent; :meth:`grad`
    reads them as exact zeros.
    """

    params: dict[str, Parameter]
    terms: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def grad(self, term: str, name: str) -> np.ndarray:
        if term not in LOSS_TERMS:
            raise GraphError(f"unknown loss term {term!r}")
        if name not in self.params:
            raise GraphError(f"unknown parameter {name!r}")
        g = self.terms.get(term, {}).get(name)
        if g is None:
            return np.zeros_like(self.params[name].value)
        return g

    def has_entry(self, term: str, name: str) -> bool:
        return name in self.terms.get(term, {})


def backward_per_term(
    losses: Mapping[str, Tensor | None], params: Sequence[Parameter]
) -> GradientBundle:
    """Attribute gradients of each loss term separately on the shared tape."""
    by_name: dict[str, Parameter] = {}
    for p in params:
        if p.name in by_name:
            raise GraphError(f"duplicate parameter name {p.name!r}")
        by_name[p.name] = p
    bundle = GradientBundle(params=by_name)
    for term, loss in losses.items():
        if term not in LOSS_TERMS:
            raise GraphError(f"unknown loss term {term!r}")
        if loss is None:
            continue
        grads = backward(loss)
        for name in grads:
            if name not in by_name:
                raise GraphError(f"tape produced gradient for unknown parameter {name!r}")
        bundle.terms[term] = grads
    return bundle


@dataclass
class FiniteDifferenceReport:
    """Outcome of a central finite-difference gradient verification."""

    max_rel_error: float
    num_checked: int
    per_param: dict[str, float]


def finite_difference_check(
    forward: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-5,
) -> FiniteDifferenceReport:
    """Compare analytic gradients of a scalar closure to central differences.

    Every scalar of every trainable parameter is perturbed by +-step; the
    relative error uses denominator max(|analytic|, |numeric|, 1e-8). Frozen
    parameters are skipped and excluded from the reported count. The closure
    is evaluated twice up front; any discrepancy raises
    :class:`DeterminismError`.
    """
    if step <= 0:
        raise InvalidInputError(f"step must be positive, got {step}")
    first = forward()
    second = forward()
    if first.value.shape != () or second.value.shape != ():
        raise GraphError("finite_difference_check needs a scalar closure")
    if float(first.value) != float(second.value):
        raise DeterminismError(
            f"closure not deterministic: {float(first.value)!r} vs {float(second.value)!r}"
        )
    analytic = backward(first)
    per_param: dict[str, float] = {}
    worst = 0.0
    checked = 0
    for p in params:
        if not p.trainable:
            continue
        grad = analytic.get(p.name, np.zeros_like(p.value))
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        p_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(forward().value)
            flat[i] = orig - step
            f_minus = float(forward().value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            p_worst = max(p_worst, abs(gflat[i] - numeric) / denom)
            checked += 1
        per_param[p.name] = p_worst
        worst = max(worst, p_worst)
    return FiniteDifferenceReport(max_rel_error=worst, num_checked=checked, per_param=per_param)
