"""Dense tensors with a recording tape for reverse-mode gradients.

Every differentiable operation creates a node stamped with a monotonically
increasing sequence number.  ``backward`` replays the recorded nodes in
strictly decreasing sequence order, which is the reverse of recording order.
Values are numpy arrays, float64 unless :func:`set_default_dtype` selects
float32 for speed runs.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "NonFiniteError",
    "CollapseError",
    "NondeterminismError",
    "set_default_dtype",
    "get_default_dtype",
    "precision",
    "no_grad",
    "make_rng",
    "tensor",
    "backward",
    "affine",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "stop_grad",
    "exp",
    "log",
    "sqrt",
    "square",
    "tsum",
    "mean",
    "logsumexp",
    "masked_logsumexp",
    "index",
    "take_rows",
    "concat",
    "rowdot",
    "rownorm",
    "cosine_rows",
    "dot_and_cosine",
    "Linear",
    "Mlp",
    "OptimizerConfig",
    "AdamW",
    "optimizer_step",
    "GradCheckReport",
    "finite_diff_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class CollapseError(ValueError):
    """A norm that must be positive was zero (representation collapse)."""


class NondeterminismError(RuntimeError):
    pass


_DTYPE: type = np.float64
_GRAD_ENABLED = True
_SEQ = itertools.count()
# stop_grad bookkeeping for finite-difference checks: None, or a dict with
# mode "record"/"replay", the captured values and a replay cursor.
_SG_STATE: dict | None = None


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def make_rng(seed: int) -> np.random.Generator:
    """PCG-64 generator; identical seed gives an identical stream everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "seq", "requires_grad")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward_fn=None,
                 requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.seq = next(_SEQ)
        if _GRAD_ENABLED and backward_fn is not None and any(p.requires_grad for p in parents):
            self.parents = tuple(parents)
            self.backward_fn = backward_fn
            self.requires_grad = True
        else:
            self.parents = ()
            self.backward_fn = None
            self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(np.array(value, dtype=_DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def tensor(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=_DTYPE))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _checked(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return value


def _quiet(fn, *args):
    # invalid results are reported by _checked, not as numpy warnings
    with np.errstate(all="ignore"):
        return fn(*args)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, seed_grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(param) into every reachable ``Parameter.grad``."""
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(node.parents)
    grads = {id(loss): np.ones_like(loss.value) if seed_grad is None else seed_grad}
    for node in sorted(nodes.values(), key=lambda n: n.seq, reverse=True):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _checked(a.value + b.value, "add")
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _checked(a.value - b.value, "sub")
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _checked(a.value * b.value, "mul")
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g * b.value, a.shape),
                                         _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _checked(_quiet(np.divide, a.value, b.value), "div")
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g / b.value, a.shape),
                                         _unbroadcast(-g * out / b.value, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = _checked(_quiet(np.exp, x.value), "exp")
    return Tensor(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    out = _checked(_quiet(np.log, x.value), "log")
    return Tensor(out, (x,), lambda g: (g / x.value,))


def sqrt(x: Tensor) -> Tensor:
    out = _checked(_quiet(np.sqrt, x.value), "sqrt")
    return Tensor(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    return Tensor(_checked(x.value * x.value, "square"), (x,), lambda g: (2.0 * g * x.value,))


def stop_grad(x: Tensor) -> Tensor:
    """Identity on values; the result has no parents, so no gradient flows back."""
    value = x.value.copy()
    state = _SG_STATE
    if state is not None:
        if state["mode"] == "record":
            state["values"].append(value)
        else:
            frozen = state["values"][state["cursor"]]
            state["cursor"] += 1
            if frozen.shape != value.shape:
                raise NondeterminismError("stop_grad replay saw a different graph")
            value = frozen
    return Tensor(value)


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.value.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(out, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.value.max(axis=axis, keepdims=True)
    e = np.exp(x.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = _checked((np.log(s) + m).squeeze(axis), "logsumexp")
    return Tensor(out, (x,), lambda g: (np.expand_dims(g, axis) * e / s,))


def masked_logsumexp(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log-sum-exp over entries where ``mask`` is true (2-D input)."""
    if x.value.ndim != 2 or mask.shape != x.shape:
        raise ShapeError(f"masked_logsumexp needs 2-D input and matching mask, got {x.shape} and {mask.shape}")
    if not mask.any(axis=1).all():
        raise ValueError("every row needs at least one unmasked entry")
    masked = np.where(mask, x.value, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    out = _checked((np.log(s) + m)[:, 0], "masked_logsumexp")
    return Tensor(out, (x,), lambda g: (g[:, None] * e / s,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _checked(a.value @ b.value, "matmul")
    return Tensor(out, (a, b), lambda g: (g @ b.value.T if a.requires_grad else None,
                                         a.value.T @ g if b.requires_grad else None))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    return Tensor(x.value.T, (x,), lambda g: (g.T,))


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = x W + b for x of shape (B, m), W (m, n), b (n,)."""
    x = _as_tensor(x)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    out = _checked(x.value @ W.value + b.value, "affine")
    return Tensor(out, (x, W, b), lambda g: (g @ W.value.T if x.requires_grad else None,
                                             x.value.T @ g if W.requires_grad else None,
                                             g.sum(axis=0) if b.requires_grad else None))


def index(x: Tensor, key) -> Tensor:
    """Fancy indexing with scatter-add backward (repeated indices accumulate)."""
    out = x.value[key]

    def bw(g):
        full = np.zeros_like(x.value)
        np.add.at(full, key, g)
        return (full,)

    return Tensor(np.array(out), (x,), bw)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    return index(table, idx)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis)
                     for k in range(len(tensors)))

    return Tensor(out, tensors, bw)


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b), axis=1)


def rownorm(a: Tensor) -> Tensor:
    return sqrt(tsum(square(a), axis=1))


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    na, nb = rownorm(a), rownorm(b)
    if np.any(na.value == 0) or np.any(nb.value == 0):
        raise CollapseError("cosine of a zero-norm vector (collapsed representation)")
    return div(rowdot(a, b), mul(na, nb))


def dot_and_cosine(a, b) -> tuple[float, float]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"dot_and_cosine needs equal-length vectors, got {a.shape} and {b.shape}")
    dot = float(a @ b)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        raise CollapseError("cosine of a zero-norm vector")
    return dot, dot / (na * nb)


# ---------------------------------------------------------------- layers


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator | None,
                 zero: bool = False):
        if zero or rng is None:
            w = np.zeros((n_in, n_out))
        else:
            bound = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.W = Parameter(f"{name}.W", w)
        self.b = Parameter(f"{name}.b", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.W, self.b)

    def parameters(self) -> dict[str, Parameter]:
        return {self.W.name: self.W, self.b.name: self.b}


class Mlp:
    """Stack of Linear layers with ReLU between them and a linear output."""

    def __init__(self, name: str, sizes: Sequence[int], rng: np.random.Generator | None,
                 zero: bool = False):
        self.layers = [Linear(f"{name}.{k}", sizes[k], sizes[k + 1], rng, zero)
                       for k in range(len(sizes) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = relu(x)
        return x

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerConfig:
    mode: str = "adamw"  # "adamw" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


class AdamW:
    """Decoupled-weight-decay Adam; updates parameters in lexicographic name order."""

    def __init__(self, params: Mapping[str, Parameter], lr: float,
                 config: OptimizerConfig | None = None, lr_scale: Mapping[str, float] | None = None):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.config = config or OptimizerConfig()
        if self.config.mode not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.config.mode!r}")
        self.lr_scale = dict(lr_scale or {})
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def _lr_for(self, name: str) -> float:
        for prefix, scale in self.lr_scale.items():
            if name.startswith(prefix):
                return self.lr * scale
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        c = self.config
        self.t += 1
        for name, p in self.params.items():
            lr = self._lr_for(name)
            g = p.grad
            decay = lr * c.weight_decay * p.value if c.weight_decay else 0.0
            if c.mode == "sgd":
                p.value = p.value - decay - lr * g
            else:
                self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
                self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
                mhat = self.m[name] / (1 - c.beta1 ** self.t)
                vhat = self.v[name] / (1 - c.beta2 ** self.t)
                p.value = p.value - decay - lr * mhat / (np.sqrt(vhat) + c.eps)
            p.value = p.value.astype(p.grad.dtype, copy=False)
            p.zero_grad()


def optimizer_step(params: Mapping[str, Parameter], lr: float, config: OptimizerConfig | None = None,
                   state: AdamW | None = None) -> AdamW:
    """One update of ``params``; pass the returned state back in for the next step."""
    opt = state or AdamW(params, lr, config)
    opt.step()
    return opt


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    status: dict[str, str] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def failed(self) -> list[str]:
        return [k for k, s in self.status.items() if s == "fail"]

    @property
    def passed(self) -> bool:
        return not self.failed

    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


@contextlib.contextmanager
def _sg_mode(mode: str, values: list):
    global _SG_STATE
    old = _SG_STATE
    _SG_STATE = {"mode": mode, "values": values, "cursor": 0}
    try:
        yield _SG_STATE
    finally:
        _SG_STATE = old


def _eval(loss_fn, frozen: list | None) -> float:
    with no_grad():
        if frozen is None:
            return float(loss_fn().value)
        with _sg_mode("replay", frozen) as state:
            v = float(loss_fn().value)
            if state["cursor"] != len(frozen):
                raise NondeterminismError("stop_grad replay saw a different graph")
            return v


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Parameter] | Iterable[Parameter],
                      epsilon: float = 1e-6, tolerance: float = 1e-4, floor: float = 1e-6,
                      max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    Stop-gradient outputs are captured at the unperturbed point and replayed as
    constants while perturbing, so the numeric derivative measures the same
    function the tape differentiates.  A parameter whose tape gradient is zero
    while the unfrozen numeric derivative is not is reported as
    ``"zero by sg"``.  Relative error is ``|a - n| / max(|a|, |n|, floor)``,
    where the floor is raised to ten thousand times the central-difference
    round-off ``eps_machine * max(|loss|, 1) / epsilon`` so that exactly-zero
    gradients are not judged on rounding noise alone.
    """
    if not isinstance(params, Mapping):
        params = {p.name: p for p in params}
    params = dict(sorted(params.items()))
    for p in params.values():
        p.zero_grad()
    frozen: list = []
    with _sg_mode("record", frozen):
        loss = loss_fn()
    base = float(loss.value)
    backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    for p in params.values():
        p.zero_grad()
    if _eval(loss_fn, frozen) != base or float(loss_fn().value) != base:
        raise NondeterminismError("loss_fn returned different values on re-evaluation")

    floor = max(floor, 1e4 * np.finfo(np.float64).eps * max(abs(base), 1.0) / epsilon)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        p.value = np.ascontiguousarray(p.value)
        flat = p.value.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort((rng or make_rng(0)).choice(flat.size, max_entries, replace=False))
        worst = 0.0
        numeric_any = 0.0
        for k in entries:
            orig = flat[k]
            flat[k] = orig + epsilon
            fp = _eval(loss_fn, frozen)
            fp_free = _eval(loss_fn, None) if not analytic[name].any() else fp
            flat[k] = orig - epsilon
            fm = _eval(loss_fn, frozen)
            fm_free = _eval(loss_fn, None) if not analytic[name].any() else fm
            flat[k] = orig
            num = (fp - fm) / (2 * epsilon)
            numeric_any = max(numeric_any, abs((fp_free - fm_free) / (2 * epsilon)))
            a = float(analytic[name].reshape(-1)[k])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        report.max_rel_error[name] = worst
        if not analytic[name].any() and numeric_any > floor and worst <= tolerance:
            report.status[name] = "zero by sg"
        else:
            report.status[name] = "ok" if worst <= tolerance else "fail"
    return report
