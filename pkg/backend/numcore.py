"""
Dense float64 tensors with tape-based reverse-mode differentiation and Adam.

Every operation goes through `apply_primitive`, which validates shapes, rejects
non-finite results and, while a `recording()` block is active, appends the
primitive and its backward rule to the current tape. `backward` replays the tape
in reverse and returns a gradient map keyed by tensor id.
"""

import dataclasses
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    """Immutable float64 array. `grad` is filled in by `backward` for leaves."""

    __slots__ = ("id", "data", "requires_grad", "grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self._init(arr, requires_grad)

    def _init(self, arr: np.ndarray, requires_grad: bool) -> None:
        arr.setflags(write=False)
        self.id = next(_ids)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        t._init(arr, requires_grad)
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False): return reduce_sum(self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims: bool = False): return reduce_mean(self, axis=axis, keepdims=keepdims)
    def relu(self): return relu(self)
    def tanh(self): return tanh(self)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sqrt(self): return sqrt(self)
    def softplus(self): return softplus(self)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ------------------------
# Tape
# ------------------------
@dataclass
class TapeRecord:
    kind: str
    input_ids: Tuple[int, ...]
    input_requires: Tuple[bool, ...]
    output_id: int
    vjp: VJP


@dataclass
class Tape:
    """Primitive applications in execution order; ids grow monotonically."""

    records: List[TapeRecord] = field(default_factory=list)
    leaves: Dict[int, Tensor] = field(default_factory=dict)
    _produced: set = field(default_factory=set, repr=False)

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, vjp: VJP) -> None:
        for t in inputs:
            if t.requires_grad and t.id not in self._produced:
                self.leaves.setdefault(t.id, t)
        self.records.append(
            TapeRecord(
                kind=kind,
                input_ids=tuple(t.id for t in inputs),
                input_requires=tuple(t.requires_grad for t in inputs),
                output_id=output.id,
                vjp=vjp,
            )
        )
        self._produced.add(output.id)

    def __len__(self) -> int:
        return len(self.records)


def current_tape() -> Optional[Tape]:
    return getattr(_local, "tape", None)


@contextmanager
def recording():
    """Record primitives applied inside the block onto a fresh tape."""
    tape = Tape()
    previous = current_tape()
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = previous


@contextmanager
def no_recording():
    previous = current_tape()
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = previous


# ------------------------
# Primitive registry
# ------------------------
Forward = Callable[..., Tuple[np.ndarray, VJP]]
PRIMITIVES: Dict[str, Forward] = {}


def primitive(kind: str):
    def register(fn: Forward) -> Forward:
        PRIMITIVES[kind] = fn
        return fn
    return register


def apply_primitive(kind: str, inputs: Sequence[Union[Tensor, ArrayLike]], **attrs: Any) -> Tensor:
    """Run one primitive, validate its output and record it when a tape is active."""
    try:
        forward = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive '{kind}'") from None
    tensors = [as_tensor(x) for x in inputs]
    out, vjp = forward(*[t.data for t in tensors], **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced a non-finite value (input shapes {[t.shape for t in tensors]})")
    requires = any(t.requires_grad for t in tensors)
    result = Tensor._wrap(out, requires)
    tape = current_tape()
    if tape is not None and requires:
        tape.record(kind, tensors, result, vjp)
    return result


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


@primitive("add")
def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@primitive("sub")
def _sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@primitive("mul")
def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@primitive("div")
def _div(a, b):
    _broadcast_shape("div", a, b)
    if np.any(b == 0):
        raise NonFiniteError("div: division by zero")
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


@primitive("neg")
def _neg(a):
    return -a, lambda g: (-g,)


@primitive("matmul")
def _matmul(a, b):
    """(..., n, k) @ (..., k, m) -> (..., n, m); leading dims broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    out = np.matmul(a, b)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


@primitive("relu")
def _relu(a):
    return np.maximum(a, 0.0), lambda g: (g * (a > 0),)


@primitive("tanh")
def _tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


@primitive("softplus")
def _softplus(a):
    out = np.logaddexp(0.0, a)
    return out, lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * a)),)


@primitive("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@primitive("log")
def _log(a):
    if np.any(a <= 0):
        raise NonFiniteError("log: non-positive input")
    return np.log(a), lambda g: (g / a,)


@primitive("sqrt")
def _sqrt(a):
    if np.any(a < 0):
        raise NonFiniteError("sqrt: negative input")
    out = np.sqrt(a)

    def vjp(g):
        if np.any(out == 0):
            raise NonFiniteError("sqrt: gradient undefined at 0")
        return (g * 0.5 / out,)

    return out, vjp


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


@primitive("sum")
def _sum(a, axis=None, keepdims=False):
    out = np.sum(a, axis=axis, keepdims=keepdims)
    return np.asarray(out), lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)


@primitive("mean")
def _mean(a, axis=None, keepdims=False):
    if a.size == 0:
        raise ShapeError("mean: empty tensor")
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size / np.asarray(out).size
    return np.asarray(out), lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)


@primitive("log_sum_exp")
def _log_sum_exp(a, axis=-1, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    s = np.sum(np.exp(a - m), axis=axis, keepdims=True)
    full = m + np.log(s)
    soft = np.exp(a - full)
    out = full if keepdims else np.squeeze(full, axis=axis)
    return out, lambda g: (soft * _expand_reduced(g, a.shape, axis, keepdims),)


@primitive("concat")
def _concat(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[x.shape for x in arrays]} differ off axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


@primitive("gather_rows")
def _gather_rows(a, index=None):
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")

    def vjp(g):
        out = np.zeros_like(a)
        np.add.at(out, idx, g)
        return (out,)

    return a[idx], vjp


@primitive("reshape")
def _reshape(a, shape=None):
    try:
        out = np.reshape(a, shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return out, lambda g: (np.reshape(g, a.shape),)


@primitive("transpose")
def _transpose(a):
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2 dims, got {a.shape}")
    return np.swapaxes(a, -1, -2), lambda g: (np.swapaxes(g, -1, -2),)


@primitive("broadcast_to")
def _broadcast_to(a, shape=None):
    try:
        out = np.broadcast_to(a, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return np.array(out), lambda g: (_unbroadcast(g, a.shape),)


def add(a, b): return apply_primitive("add", [a, b])
def sub(a, b): return apply_primitive("sub", [a, b])
def mul(a, b): return apply_primitive("mul", [a, b])
def div(a, b): return apply_primitive("div", [a, b])
def neg(a): return apply_primitive("neg", [a])
def matmul(a, b): return apply_primitive("matmul", [a, b])
def relu(a): return apply_primitive("relu", [a])
def tanh(a): return apply_primitive("tanh", [a])
def softplus(a): return apply_primitive("softplus", [a])
def exp(a): return apply_primitive("exp", [a])
def log(a): return apply_primitive("log", [a])
def sqrt(a): return apply_primitive("sqrt", [a])
def reduce_sum(a, axis=None, keepdims=False): return apply_primitive("sum", [a], axis=axis, keepdims=keepdims)
def reduce_mean(a, axis=None, keepdims=False): return apply_primitive("mean", [a], axis=axis, keepdims=keepdims)
def log_sum_exp(a, axis=-1, keepdims=False): return apply_primitive("log_sum_exp", [a], axis=axis, keepdims=keepdims)
def concat(tensors, axis=0): return apply_primitive("concat", list(tensors), axis=axis)
def gather_rows(a, index): return apply_primitive("gather_rows", [a], index=np.asarray(index, dtype=np.int64))
def reshape(a, shape): return apply_primitive("reshape", [a], shape=tuple(shape))
def transpose(a): return apply_primitive("transpose", [a])
def broadcast_to(a, shape): return apply_primitive("broadcast_to", [a], shape=tuple(shape))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return a - log_sum_exp(a, axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


# ------------------------
# Backward
# ------------------------
def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] = ()) -> Dict[int, np.ndarray]:
    """Reverse-mode sweep. Every requires_grad leaf gets an entry (zeros when disconnected)."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output_id, None) if rec.output_id != loss.id else grads.get(rec.output_id)
        if g is None:
            continue
        for iid, needs, ig in zip(rec.input_ids, rec.input_requires, rec.vjp(g)):
            if not needs or ig is None:
                continue
            grads[iid] = grads[iid] + ig if iid in grads else np.array(ig, dtype=np.float64)

    leaves: Dict[int, Tensor] = dict(tape.leaves)
    for p in params:
        leaves.setdefault(p.id, p)
    if loss.requires_grad and not tape.records:
        leaves.setdefault(loss.id, loss)

    result: Dict[int, np.ndarray] = {}
    for tid, leaf in leaves.items():
        g = grads.get(tid)
        g = np.zeros_like(leaf.data) if g is None else np.reshape(g, leaf.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("backward produced a non-finite gradient")
        leaf.grad = g
        result[tid] = g
    return result


# ------------------------
# Adam
# ------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, Tensor], AdamState]:
    """Bias-corrected Adam. Returns new parameter tensors and a new state."""
    if state.step < 0:
        raise ValueError("AdamState.step must be non-negative")
    step = state.step + 1
    m_new: Dict[str, np.ndarray] = {}
    v_new: Dict[str, np.ndarray] = {}
    updated: Dict[str, Tensor] = {}
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} does not match parameter '{name}' {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"adam_step: moment shapes do not match parameter '{name}' {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_stab)
        updated[name] = Tensor._wrap(p.data - update, p.requires_grad)
        m_new[name], v_new[name] = m, v
    return updated, dataclasses.replace(state, step=step, m=m_new, v=v_new)


def train_step(
    loss_fn: Callable[[Dict[str, Tensor]], Tuple[Tensor, Dict[str, float]]],
    params: Dict[str, Tensor],
    state: AdamState,
) -> Tuple[float, Dict[str, Tensor], AdamState, Dict[str, float]]:
    """Record loss_fn, differentiate and apply one Adam update."""
    with recording() as tape:
        loss, extras = loss_fn(params)
    gmap = backward(loss, tape, params.values())
    grads = {name: gmap[p.id] for name, p in params.items()}
    new_params, new_state = adam_step(params, grads, state)
    return loss.item(), new_params, new_state, extras


# ------------------------
# Gradient checking
# ------------------------
Point = Union[np.ndarray, Mapping[str, np.ndarray]]


def finite_diff_check(
    fn: Callable[[Any], Tensor],
    point: Point,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    `point` is an array or a mapping of named arrays; `fn` receives Tensors of the
    same structure and must return a scalar. `max_coords` samples coordinates per
    array for large parameter sets.
    """
    named = isinstance(point, Mapping)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in (point.items() if named else [("x", point)])}

    def call(values: Dict[str, np.ndarray], requires_grad: bool):
        tensors = {k: Tensor(v, requires_grad=requires_grad) for k, v in values.items()}
        out = fn(tensors if named else tensors["x"])
        return out, tensors

    with recording() as tape:
        loss, tensors = call(arrays, True)
    gmap = backward(loss, tape, tensors.values())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, base in arrays.items():
        analytic = gmap[tensors[name].id].reshape(-1)
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        for i in coords:
            vals = []
            for sign in (1.0, -1.0):
                bumped = {k: v.copy() for k, v in arrays.items()}
                bumped[name].reshape(-1)[i] += sign * eps
                with no_recording():
                    out, _ = call(bumped, False)
                value = out.item()
                if not np.isfinite(value):
                    raise NonFiniteError("finite_diff_check: non-finite evaluation")
                vals.append(value)
            numeric = (vals[0] - vals[1]) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst


# ------------------------
# Parameter bundles
# ------------------------
def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class ParamBundle:
    """Named trainable tensors of one network component."""

    tensors: Dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def replace(self, tensors: Mapping[str, Tensor]):
        return dataclasses.replace(self, tensors=dict(tensors))

    def frozen(self):
        return self.replace({k: Tensor._wrap(t.data, False) for k, t in self.tensors.items()})

    def trainable(self):
        return self.replace({k: Tensor._wrap(t.data, True) for k, t in self.tensors.items()})

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def same_values(self, other: "ParamBundle") -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(np.array_equal(t.data, other.tensors[k].data) for k, t in self.tensors.items())


def flatten_bundles(bundles: Mapping[str, ParamBundle]) -> Dict[str, Tensor]:
    return {f"{prefix}.{name}": t for prefix, b in bundles.items() for name, t in b.tensors.items()}


def unflatten_bundles(bundles: Mapping[str, ParamBundle], flat: Mapping[str, Tensor]) -> Dict[str, ParamBundle]:
    out = {}
    for prefix, b in bundles.items():
        out[prefix] = b.replace({name: flat[f"{prefix}.{name}"] for name in b.tensors})
    return out
