"""
Define-by-run reverse-mode differentiation.

Forward values are computed eagerly. While a :class:`Tape` is active (used as a
context manager), every operation touching a variable that requires gradients
appends a record with its backward rule. :func:`backward` replays the records
in reverse and then clears the tape.

    with Tape():
        loss = mean(relu(x))
    backward(loss)

Outside a tape nothing is recorded, which is how evaluation runs.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError

_ids = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Variable:
    """A tensor value with an attached gradient buffer.

    Leaves (parameters, inputs) live across tapes. Non-leaf variables belong to
    the tape that recorded them.
    """

    __slots__ = ("value", "grad", "requires_grad", "node_id", "tape", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(value, np.ndarray) and dtype is None:
            self.value = value
        else:
            self.value = np.asarray(value, dtype=dtype or T.DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.node_id = next(_ids)
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def astype(self, dtype) -> None:
        """Convert value (and gradient buffer) in place to ``dtype``."""
        self.value = self.value.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    name: str
    inputs: Tuple[Variable, ...]
    output: Variable
    rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    def __init__(self):
        self.records: List[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tapes must be exited in the order they were entered")
        stack.pop()

    def __len__(self):
        return len(self.records)


def _as_variable(x, like: Variable | None = None) -> Variable:
    if isinstance(x, Variable):
        return x
    dtype = like.dtype if like is not None else None
    return Variable(np.asarray(x, dtype=dtype))


def _pair(a, b) -> Tuple[Variable, Variable]:
    if isinstance(a, Variable):
        return a, _as_variable(b, a)
    return _as_variable(a, b), b


def record(
    name: str,
    value: np.ndarray,
    inputs: Sequence[Variable],
    rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Variable:
    """Wrap an eagerly computed ``value`` and register its backward ``rule``.

    ``rule`` maps the gradient of the output to one gradient per input (``None``
    for inputs that need none).
    """
    tape = active_tape()
    for v in inputs:
        if v.tape is not None and tape is not None and v.tape is not tape:
            raise UsageError(f"{name}: input {v!r} was recorded on a different tape")
        if v.tape is not None and v.tape.consumed:
            raise UsageError(f"{name}: input {v!r} belongs to a tape already consumed by backward()")
    needs_grad = any(v.requires_grad for v in inputs)
    out = Variable(value, requires_grad=False)
    if tape is not None and needs_grad:
        out.requires_grad = True
        out.tape = tape
        tape.records.append(_Record(name, tuple(inputs), out, rule))
    return out


def backward(loss: Variable) -> None:
    """Accumulate d(loss)/d(v) into ``v.grad`` for every variable on loss's tape."""
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any variable that requires gradients")
    tape = loss.tape
    if tape is None:
        # a leaf loss: d(loss)/d(loss) = 1
        loss.grad = loss.grad + np.ones_like(loss.value)
        return
    if tape.consumed:
        raise UsageError("this tape was already consumed by a previous backward()")
    tape.consumed = True

    loss.grad = np.ones_like(loss.value)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.rule(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise DimensionError(
                    f"{rec.name}: backward produced shape {gi.shape} for input {inp.shape}"
                )
            if inp.grad is None:
                inp.grad = gi.astype(inp.dtype, copy=True)
            else:
                inp.grad = inp.grad + gi
    tape.records.clear()


# ---------------------------------------------------------------------------
# ReLU kink monitor (used by grad_check to skip coordinates whose finite
# difference straddles a non-differentiable point)
# ---------------------------------------------------------------------------

def _kink_log() -> Optional[list]:
    return getattr(_local, "kinks", None)


class _KinkMonitor:
    def __enter__(self):
        self.log = []
        _local.kinks = self.log
        return self

    def __exit__(self, *exc):
        _local.kinks = None


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Variable:
    a, b = _pair(a, b)
    out = T.add(a.value, b.value)
    return record(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Variable:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    out = T.mul(av, bv)
    return record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def sum(x: Variable) -> Variable:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = np.asarray(x.value.sum(), dtype=x.dtype)
    return record("sum", out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Variable) -> Variable:
    shape, size = x.shape, x.value.size
    out = np.asarray(x.value.mean(), dtype=x.dtype)
    return record(
        "mean", out, (x,),
        lambda g: (np.broadcast_to(g / g.dtype.type(size), shape).copy(),),
    )


def relu(x: Variable) -> Variable:
    xv = x.value
    log = _kink_log()
    if log is not None:
        log.append(np.packbits(xv > 0).tobytes())
    return record("relu", T.relu(xv), (x,), lambda g: (T.relu_backward(g, xv),))


def matmul(a: Variable, b: Variable) -> Variable:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    out = T.matmul(av, bv)
    return record("matmul", out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x: Variable, weight: Variable, bias: Variable) -> Variable:
    """``x @ weight.T + bias`` for x of shape (N, in)."""
    xv, wv = x.value, weight.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise DimensionError(
            f"linear: input {xv.shape} does not match weight {wv.shape} (expected (N, {wv.shape[1]}))"
        )
    out = T.matmul(xv, wv.T) + bias.value
    return record(
        "linear", out, (x, weight, bias),
        lambda g: (g @ wv, g.T @ xv, g.sum(axis=0)),
    )


def reshape(x: Variable, shape) -> Variable:
    old = x.shape
    out = T.reshape(x.value, shape)
    return record("reshape", out, (x,), lambda g: (g.reshape(old),))


def conv2d(x: Variable, weight: Variable, bias: Variable | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Variable:
    xv, wv = x.value, weight.value
    out = T.conv2d(xv, wv, None if bias is None else bias.value, stride, padding, groups)

    def rule(g):
        gx, gw, gb = T.conv2d_backward(g, xv, wv, stride, padding, groups)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, rule)


def channel_shuffle(x: Variable, groups: int) -> Variable:
    out = T.channel_shuffle(x.value, groups)
    return record(
        "channel_shuffle", out, (x,),
        lambda g: (T.channel_shuffle_backward(g, groups),),
    )


def global_avg_pool(x: Variable) -> Variable:
    shape = x.shape
    out = T.global_avg_pool(x.value)
    return record(
        "global_avg_pool", out, (x,),
        lambda g: (T.global_avg_pool_backward(g, shape),),
    )


def batch_norm(
    x: Variable,
    gamma: Variable,
    beta: Variable,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Variable:
    """Per-channel batch normalization over (N, H, W) of an (N, C, H, W) input.

    In training mode the running statistics are updated in place.
    """
    xv = x.value
    if xv.ndim != 4:
        raise DimensionError(f"batch_norm expects (N, C, H, W), got {xv.shape}")
    c = xv.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm parameters must have shape ({c},)")
    dt = xv.dtype.type
    gv = gamma.value.reshape(1, c, 1, 1)
    bv = beta.value.reshape(1, c, 1, 1)

    if training:
        m = xv.shape[0] * xv.shape[2] * xv.shape[3]
        if m < 2:
            raise UsageError(
                f"batch_norm in training mode needs at least 2 values per channel, got {m}"
            )
        mu = xv.mean(axis=(0, 2, 3), keepdims=True)
        var = xv.var(axis=(0, 2, 3), keepdims=True)
        inv_std = dt(1.0) / np.sqrt(var + dt(eps))
        xhat = (xv - mu) * inv_std
        out = xhat * gv + bv

        mom = running_mean.dtype.type(momentum)
        running_mean *= 1 - mom
        running_mean += mom * mu.reshape(c).astype(running_mean.dtype)
        running_var *= 1 - mom
        running_var += mom * (var.reshape(c) * (m / (m - 1))).astype(running_var.dtype)

        def rule(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gv
            dx = inv_std / dt(m) * (
                dt(m) * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return dx, dgamma, dbeta
    else:
        mu = running_mean.astype(xv.dtype).reshape(1, c, 1, 1)
        inv_std = dt(1.0) / np.sqrt(running_var.astype(xv.dtype).reshape(1, c, 1, 1) + dt(eps))
        xhat = (xv - mu) * inv_std
        out = xhat * gv + bv

        def rule(g):
            return (
                g * gv * inv_std,
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

    return record("batch_norm", out, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped: int


def grad_check(
    f: Callable[[], Variable],
    params: Iterable[Variable],
    epsilon: float = 1e-4,
    max_coords: int | None = 64,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` recomputes a scalar loss from the current values of ``params``. The
    params are converted to float64 in place first. Up to ``max_coords``
    coordinates per parameter are sampled (all of them when ``None``);
    coordinates whose perturbation flips the sign of any ReLU input are
    skipped, since the derivative is not defined across the kink.
    """
    return grad_check_detail(f, params, epsilon, max_coords, seed).max_relative_error


def grad_check_detail(f, params, epsilon=1e-4, max_coords=64, seed=0) -> GradCheckResult:
    params = list(params)
    for p in params:
        if p.value.dtype != T.GRADCHECK_DTYPE:
            p.astype(T.GRADCHECK_DTYPE)
        p.grad = np.zeros_like(p.value)

    with _KinkMonitor() as base, Tape():
        loss = f()
    backward(loss)
    base_pattern = base.log
    analytic = [p.grad.copy() for p in params]

    def evaluate() -> tuple[float, list]:
        with _KinkMonitor() as mon:
            val = float(f().value)
        return val, mon.log

    rng = T.make_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        size = flat.size
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + epsilon
            f_plus, kinks_plus = evaluate()
            flat[idx] = orig - epsilon
            f_minus, kinks_minus = evaluate()
            flat[idx] = orig
            if kinks_plus != base_pattern or kinks_minus != base_pattern:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = float(grad.reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
            checked += 1
    for p in params:
        p.zero_grad()
    return GradCheckResult(worst, checked, skipped)
