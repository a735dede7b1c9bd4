"""Dense float64 tensors with reverse-mode differentiation.

Every operation records itself on a per-thread tape (a monotonically
increasing op id); ``backward`` replays reachable ops in reverse recorded
order, which makes gradient accumulation deterministic. Each simulated
parallel worker runs in its own thread and therefore owns its own tape;
graphs never span threads.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_local = threading.local()

# Finiteness validation of op outputs. Cheap at desk scale; can be switched
# off for micro-benchmarks via set_finite_checks(False).
_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _next_op_id() -> int:
    n = getattr(_local, "op_counter", 0)
    _local.op_counter = n + 1
    return n


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op_id = _next_op_id()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience operators used by tests and small expressions.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, where: str) -> Tensor:
    """Record an op result on the tape."""
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    _check_finite(arr, where)
    out.data = arr
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    out._op_id = _next_op_id()
    return out


def custom_op(
    data: np.ndarray, parents: Sequence[Tensor], backward_fn, name: str
) -> Tensor:
    """Record an externally-defined op (used by the collective layer)."""
    return _make(data, parents, backward_fn, name)


def backward(root: Tensor) -> None:
    """Backpropagate from a scalar root through the recorded tape."""
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    # Collect the reachable subgraph, then replay in reverse recorded order.
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._op_id)
    root.accumulate_grad(np.ones_like(root.data))
    for node in reversed(nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g: np.ndarray) -> None:
        a.accumulate_grad(g * c)

    return _make(a.data * c, (a,), bwd, "scale")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        a.accumulate_grad(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def bwd(g: np.ndarray) -> None:
        a.accumulate_grad(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bwd, "transpose")


def index_axis(a: Tensor, axis: int, i: int) -> Tensor:
    """Select index ``i`` along ``axis`` (removes the axis)."""
    idx: list = [slice(None)] * a.data.ndim
    idx[axis] = i
    idx_t = tuple(idx)

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        full[idx_t] = g
        a.accumulate_grad(full)

    return _make(a.data[idx_t], (a,), bwd, "index_axis")


def sum_all(a: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        a.accumulate_grad(np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), bwd, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g: np.ndarray) -> None:
        a.accumulate_grad(np.full_like(a.data, float(g) / n))

    return _make(np.asarray(a.data.mean()), (a,), bwd, "mean_all")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or identically-batched N-D operands."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}")
    if a.data.ndim != b.data.ndim and b.data.ndim != 2:
        raise ShapeError(f"unsupported matmul batching: {a.data.shape} x {b.data.shape}")
    if a.data.ndim == b.data.ndim and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul batch extents disagree: {a.data.shape} x {b.data.shape}")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate_grad(y * (g - dot))

    return _make(y, (x,), bwd, "softmax")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g * (1.0 - y * y))

    return _make(y, (x,), bwd, "tanh")


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; smooth, so finite differences verify it directly
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    y = 0.5 * x.data * (1.0 + t)

    def bwd(g: np.ndarray) -> None:
        dinner = c * (1.0 + 3 * 0.044715 * x.data**2)
        dy = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner
        x.accumulate_grad(g * dy)

    return _make(y, (x,), bwd, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    h = x.data.shape[-1]
    if gain.data.shape != (h,) or bias.data.shape != (h,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} != ({h},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bwd(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain.accumulate_grad(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias.accumulate_grad(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gx - m1 - xhat * m2))

    return _make(y, (x, gain, bias), bwd, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is drawn once and reused in backward."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g * keep)

    return _make(x.data * keep, (x,), bwd, "dropout")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any integer shape -> ids.shape + (H,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {weight.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )

    def bwd(g: np.ndarray) -> None:
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.data.shape[1]))
        weight.accumulate_grad(gw)

    return _make(weight.data[ids], (weight,), bwd, "embedding")


def add_rowwise(x: Tensor, mask_values: np.ndarray) -> Tensor:
    """Add a constant (non-differentiable) array, e.g. an attention mask."""

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g)

    return _make(x.data + mask_values, (x,), bwd, "add_rowwise")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def log_softmax_stats(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (shifted logits, per-row sum of exp) with max-subtraction.

    Shared by the serial cross-entropy and the vocabulary-sharded variant so
    that both follow bit-identical arithmetic at world size 1.
    """
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    sumexp = np.exp(shifted).sum(axis=1)
    return shifted, sumexp


def nll_from_parts(
    target_shifted: np.ndarray, sumexp: np.ndarray, active: np.ndarray
) -> float:
    """Mean negative log likelihood over active rows, from shared stats."""
    logp = target_shifted - np.log(sumexp)
    return float(-logp[active].mean())


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-softmax probability over non-ignored positions."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.data.shape}")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"targets shape {t.shape} != ({logits.data.shape[0]},) for logits "
            f"{logits.data.shape}"
        )
    n, v = logits.data.shape
    active = t != ignore_index
    if not active.any():
        raise NumericError("cross_entropy: all positions ignored, loss undefined")
    if ((t[active] < 0) | (t[active] >= v)).any():
        raise ShapeError(f"cross_entropy target outside [0, {v})")

    shifted, sumexp = log_softmax_stats(logits.data)
    safe_t = np.where(active, t, 0)
    target_shifted = shifted[np.arange(n), safe_t]
    target_shifted = np.where(active, target_shifted, 0.0)
    loss = nll_from_parts(target_shifted, sumexp, active)
    n_active = int(active.sum())

    def bwd(g: np.ndarray) -> None:
        p = np.exp(shifted) / sumexp[:, None]
        p[np.arange(n), safe_t] -= 1.0
        p[~active] = 0.0
        logits.accumulate_grad(p * (float(g) / n_active))

    return _make(np.asarray(loss), (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    h: float
    passed: bool
    per_param: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e}"


def grad_check(
    f: Callable[..., Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    denom_floor: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*params)`` against
    central finite differences.

    Relative error per element is |a - n| / max(denom_floor, |a|, |n|); the
    floor keeps near-zero gradients from inflating the ratio while leaving
    ordinary gradients on a true relative scale. ``f`` must be deterministic.
    """
    params = list(params)
    if h <= 0:
        raise ShapeError(f"grad_check step h must be positive, got {h}")
    for p in params:
        p.zero_grad()
    out = f(*params)
    if out.data.size != 1:
        raise ShapeError("grad_check target function must return a scalar")
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_err = 0.0
    per_param: dict[str, float] = {}
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*params).data)
            flat[i] = orig - h
            fm = float(f(*params).data)
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * h)
        a = analytic[k].reshape(-1)
        denom = np.maximum(denom_floor, np.maximum(np.abs(a), np.abs(num)))
        rel = np.abs(a - num) / denom
        err = float(rel.max()) if rel.size else 0.0
        per_param[f"param{k}"] = err
        max_err = max(max_err, err)
    return GradCheckReport(
        max_rel_error=max_err, tol=tol, h=h, passed=max_err < tol, per_param=per_param
    )
