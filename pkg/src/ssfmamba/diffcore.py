"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations are evaluated eagerly as they are recorded, so a tape doubles as a
trace of the program that produced it.  :func:`forward_eval` replays the
recorded nodes with fresh input values, :func:`backward` propagates a
cotangent from an output slot back to every trainable parameter.

Only a fixed set of primitives is supported.  Each primitive is a pair of
functions ``forward(attrs, *xs) -> (y, ctx)`` and
``backward(attrs, ctx, xs, y, gy) -> tuple of input cotangents`` where a
``None`` cotangent marks an input that does not receive gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import erf

LEAKY_SLOPE = 0.01


class TapeError(RuntimeError):
    pass


class Primitive(NamedTuple):
    forward: Callable
    backward: Callable
    constant: bool = False  # output carries no gradient (stop-gradient style)


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name, constant: bool = False):
    def register(cls):
        PRIMITIVES[name] = Primitive(cls.forward, cls.backward, constant)
        return cls

    return register


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

@primitive("add")
class _Add:
    def forward(attrs, a, b):
        return a + b, None

    def backward(attrs, ctx, xs, y, gy):
        return _unbroadcast(gy, xs[0].shape), _unbroadcast(gy, xs[1].shape)


@primitive("sub")
class _Sub:
    def forward(attrs, a, b):
        return a - b, None

    def backward(attrs, ctx, xs, y, gy):
        return _unbroadcast(gy, xs[0].shape), _unbroadcast(-gy, xs[1].shape)


@primitive("mul")
class _Mul:
    def forward(attrs, a, b):
        return a * b, None

    def backward(attrs, ctx, xs, y, gy):
        a, b = xs
        return _unbroadcast(gy * b, a.shape), _unbroadcast(gy * a, b.shape)


@primitive("div")
class _Div:
    def forward(attrs, a, b):
        return a / b, None

    def backward(attrs, ctx, xs, y, gy):
        a, b = xs
        return _unbroadcast(gy / b, a.shape), _unbroadcast(-gy * a / (b * b), b.shape)


@primitive("neg")
class _Neg:
    def forward(attrs, a):
        return -a, None

    def backward(attrs, ctx, xs, y, gy):
        return (-gy,)


@primitive("scale")
class _Scale:
    def forward(attrs, a):
        return attrs["c"] * a, None

    def backward(attrs, ctx, xs, y, gy):
        return (attrs["c"] * gy,)


@primitive("power")
class _Power:
    def forward(attrs, a):
        return a ** attrs["p"], None

    def backward(attrs, ctx, xs, y, gy):
        p = attrs["p"]
        return (gy * p * xs[0] ** (p - 1),)


@primitive("matmul")
class _Matmul:
    """2-D @ 2-D, or a stack of matrices @ 2-D."""

    def forward(attrs, a, b):
        if a.shape[-1] != b.shape[0] or b.ndim != 2:
            raise ValueError(f"matmul shapes {a.shape} @ {b.shape}")
        return a @ b, None

    def backward(attrs, ctx, xs, y, gy):
        a, b = xs
        ga = gy @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ gy.reshape(-1, gy.shape[-1])
        return ga, gb


# ---------------------------------------------------------------------------
# pointwise nonlinearities

@primitive("exp")
class _Exp:
    def forward(attrs, a):
        return np.exp(a), None

    def backward(attrs, ctx, xs, y, gy):
        return (gy * y,)


@primitive("log")
class _Log:
    def forward(attrs, a):
        return np.log(a), None

    def backward(attrs, ctx, xs, y, gy):
        return (gy / xs[0],)


@primitive("tanh")
class _Tanh:
    def forward(attrs, a):
        return np.tanh(a), None

    def backward(attrs, ctx, xs, y, gy):
        return (gy * (1.0 - y * y),)


def _sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@primitive("sigmoid")
class _Sigmoid:
    def forward(attrs, a):
        return _sigmoid(a), None

    def backward(attrs, ctx, xs, y, gy):
        return (gy * y * (1.0 - y),)


@primitive("silu")
class _Silu:
    def forward(attrs, a):
        s = _sigmoid(a)
        return a * s, s

    def backward(attrs, ctx, xs, y, gy):
        s = ctx
        return (gy * (s + xs[0] * s * (1.0 - s)),)


@primitive("gelu")
class _Gelu:
    def forward(attrs, a):
        cdf = 0.5 * (1.0 + erf(a / np.sqrt(2.0)))
        return a * cdf, cdf

    def backward(attrs, ctx, xs, y, gy):
        a = xs[0]
        pdf = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
        return (gy * (ctx + a * pdf),)


@primitive("leaky_relu")
class _LeakyRelu:
    def forward(attrs, a):
        return np.where(a > 0, a, LEAKY_SLOPE * a), None

    def backward(attrs, ctx, xs, y, gy):
        return (np.where(xs[0] > 0, gy, LEAKY_SLOPE * gy),)


@primitive("softplus")
class _Softplus:
    def forward(attrs, a):
        return np.logaddexp(0.0, a), None

    def backward(attrs, ctx, xs, y, gy):
        return (gy * _sigmoid(xs[0]),)


# ---------------------------------------------------------------------------
# reductions and shape plumbing

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@primitive("sum")
class _Sum:
    def forward(attrs, a):
        return np.sum(a, axis=attrs["axis"], keepdims=attrs["keepdims"]), None

    def backward(attrs, ctx, xs, y, gy):
        return (_expand_reduced(gy, xs[0].shape, attrs["axis"], attrs["keepdims"]).copy(),)


@primitive("mean")
class _Mean:
    def forward(attrs, a):
        return np.mean(a, axis=attrs["axis"], keepdims=attrs["keepdims"]), None

    def backward(attrs, ctx, xs, y, gy):
        a = xs[0]
        count = a.size // np.asarray(y).size
        g = _expand_reduced(gy, a.shape, attrs["axis"], attrs["keepdims"])
        return (g / count,)


@primitive("max_nograd", constant=True)
class _MaxNoGrad:
    """Max reduction whose result is treated as a constant (stabilizer shifts)."""

    def forward(attrs, a):
        return np.max(a, axis=attrs["axis"], keepdims=attrs["keepdims"]), None

    def backward(attrs, ctx, xs, y, gy):
        return (None,)


@primitive("stop_gradient", constant=True)
class _StopGradient:
    def forward(attrs, a):
        return a.copy(), None

    def backward(attrs, ctx, xs, y, gy):
        return (None,)


@primitive("reshape")
class _Reshape:
    def forward(attrs, a):
        return a.reshape(attrs["shape"]), None

    def backward(attrs, ctx, xs, y, gy):
        return (gy.reshape(xs[0].shape),)


@primitive("permute")
class _Permute:
    def forward(attrs, a):
        return np.transpose(a, attrs["axes"]), None

    def backward(attrs, ctx, xs, y, gy):
        return (np.transpose(gy, np.argsort(attrs["axes"])),)


@primitive("gather")
class _Gather:
    def forward(attrs, a):
        return np.take(a, attrs["index"], axis=attrs["axis"]), None

    def backward(attrs, ctx, xs, y, gy):
        axis = attrs["axis"] % xs[0].ndim
        g = np.zeros(xs[0].shape)
        moved = np.moveaxis(g, axis, 0)
        np.add.at(moved, attrs["index"], np.moveaxis(gy, axis, 0))
        return (g,)


@primitive("concat")
class _Concat:
    def forward(attrs, *xs):
        return np.concatenate(xs, axis=attrs["axis"]), None

    def backward(attrs, ctx, xs, y, gy):
        cuts = np.cumsum([x.shape[attrs["axis"]] for x in xs])[:-1]
        return tuple(np.split(gy, cuts, axis=attrs["axis"]))


@primitive("slice")
class _Slice:
    def forward(attrs, a):
        return a[attrs["index"]].copy(), None

    def backward(attrs, ctx, xs, y, gy):
        g = np.zeros(xs[0].shape)
        g[attrs["index"]] = gy
        return (g,)


@primitive("broadcast")
class _Broadcast:
    def forward(attrs, a):
        return np.broadcast_to(a, attrs["shape"]).copy(), None

    def backward(attrs, ctx, xs, y, gy):
        return (_unbroadcast(gy, xs[0].shape),)


@primitive("pad")
class _Pad:
    def forward(attrs, a):
        return np.pad(a, attrs["width"]), None

    def backward(attrs, ctx, xs, y, gy):
        index = tuple(slice(lo, gy.shape[i] - hi) for i, (lo, hi) in enumerate(attrs["width"]))
        return (gy[index].copy(),)


# ---------------------------------------------------------------------------
# tape

@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    out: int


@dataclass
class Tape:
    """Recorded program plus the values of its most recent evaluation.

    Slots hold arrays; inputs, parameters and constants are leaf slots and
    every node writes exactly one new slot.  Because a node can only refer to
    slots that already exist, node order is a topological order by
    construction.
    """

    nodes: list[Node] = field(default_factory=list)
    values: list = field(default_factory=list)
    ctx: dict = field(default_factory=dict)
    inputs: dict[str, int] = field(default_factory=dict)
    params: dict[str, int] = field(default_factory=dict)
    trainable: set = field(default_factory=set)
    outputs: dict[str, int] = field(default_factory=dict)
    evaluated: bool = True

    def _slot(self, value) -> int:
        self.values.append(value)
        return len(self.values) - 1

    def input(self, name: str, value) -> "Var":
        if name in self.inputs:
            raise TapeError(f"duplicate input {name!r}")
        self.inputs[name] = self._slot(_as_array(value))
        return Var(self, self.inputs[name])

    def param(self, name: str, value, trainable: bool = True) -> "Var":
        """Register (or fetch, if already present) a named parameter slot."""
        if name in self.params:
            return Var(self, self.params[name])
        self.params[name] = self._slot(_as_array(value))
        if trainable:
            self.trainable.add(name)
        return Var(self, self.params[name])

    def const(self, value) -> "Var":
        return Var(self, self._slot(_as_array(value)))

    def output(self, name: str, var: "Var") -> "Var":
        self.outputs[name] = var.slot
        return var

    def apply(self, kind: str, *args, **attrs) -> "Var":
        try:
            prim = PRIMITIVES[kind]
        except KeyError:
            raise TapeError(f"unknown primitive {kind!r}") from None
        slots = tuple(self._lift(a) for a in args)
        index = len(self.nodes)
        try:
            y, ctx = prim.forward(attrs, *(self.values[s] for s in slots))
        except ValueError as exc:
            shapes = [self.values[s].shape for s in slots]
            raise TapeError(f"node {index} ({kind}) on shapes {shapes}: {exc}") from exc
        out = self._slot(_as_array(y))
        self.nodes.append(Node(kind, slots, attrs, out))
        if ctx is not None:
            self.ctx[index] = ctx
        return Var(self, out)

    def _lift(self, a) -> int:
        if isinstance(a, Var):
            if a.tape is not self:
                raise TapeError("variable belongs to a different tape")
            return a.slot
        return self.const(a).slot

    def clear_values(self) -> None:
        """Drop intermediate values (leaves are kept); backward needs a new forward_eval."""
        for node in self.nodes:
            self.values[node.out] = None
        self.ctx.clear()
        self.evaluated = False

    def value(self, name: str) -> np.ndarray:
        for table in (self.outputs, self.inputs, self.params):
            if name in table:
                return self.values[table[name]]
        raise KeyError(name)


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Var:
    """Handle to one slot of a tape, with operator sugar."""

    __slots__ = ("tape", "slot")
    __array_priority__ = 100

    def __init__(self, tape: Tape, slot: int):
        self.tape = tape
        self.slot = slot

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.slot]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(slot={self.slot}, shape={self.shape})"

    def __add__(self, other):
        return self.tape.apply("add", self, other)

    def __radd__(self, other):
        return self.tape.apply("add", other, self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, other)

    def __rsub__(self, other):
        return self.tape.apply("sub", other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", self, c=float(other))
        return self.tape.apply("mul", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", self, c=1.0 / float(other))
        return self.tape.apply("div", self, other)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __pow__(self, p):
        return self.tape.apply("power", self, p=float(p))

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, other)

    def __rmatmul__(self, other):
        return self.tape.apply("matmul", other, self)

    def __getitem__(self, index):
        if not isinstance(index, tuple):
            index = (index,)
        return self.tape.apply("slice", self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.apply("reshape", self, shape=shape)

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.apply("mean", self, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# functional front end (thin wrappers so model code reads like numpy)

def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TapeError("no tape variable among arguments")


def exp(x): return x.tape.apply("exp", x)
def log(x): return x.tape.apply("log", x)
def tanh(x): return x.tape.apply("tanh", x)
def sigmoid(x): return x.tape.apply("sigmoid", x)
def silu(x): return x.tape.apply("silu", x)
def gelu(x): return x.tape.apply("gelu", x)
def leaky_relu(x): return x.tape.apply("leaky_relu", x)
def softplus(x): return x.tape.apply("softplus", x)
def stop_gradient(x): return x.tape.apply("stop_gradient", x)


def max_nograd(x, axis=None, keepdims=False):
    return x.tape.apply("max_nograd", x, axis=axis, keepdims=keepdims)


def permute(x, axes):
    return x.tape.apply("permute", x, axes=tuple(axes))


def gather(x, index, axis=0):
    return x.tape.apply("gather", x, index=np.asarray(index, dtype=np.intp), axis=axis)


def concat(xs, axis=0):
    return _tape_of(*xs).apply("concat", *xs, axis=axis)


def broadcast_to(x, shape):
    return x.tape.apply("broadcast", x, shape=tuple(shape))


def pad(x, width):
    return x.tape.apply("pad", x, width=tuple(tuple(w) for w in width))


# ---------------------------------------------------------------------------
# evaluation

def forward_eval(tape: Tape, inputs: dict | None = None, params: dict | None = None,
                 frozen: dict | None = None) -> dict:
    """Re-run every recorded node with new input (and optionally parameter) values.

    Returns the named outputs.  Values of intermediate slots are overwritten so
    a following :func:`backward` differentiates this evaluation.  ``frozen``
    maps node indices to values used instead of recomputing those nodes.
    """
    frozen = frozen or {}
    for table, new in ((tape.inputs, inputs or {}), (tape.params, params or {})):
        for name, value in new.items():
            if name not in table:
                raise TapeError(f"unknown name {name!r}")
            value = _as_array(value)
            old = tape.values[table[name]]
            if value.shape != old.shape:
                raise TapeError(f"{name!r}: expected shape {old.shape}, got {value.shape}")
            tape.values[table[name]] = value
    tape.ctx.clear()
    tape.evaluated = False
    for index, node in enumerate(tape.nodes):
        prim = PRIMITIVES.get(node.kind)
        if prim is None:
            raise TapeError(f"node {index}: unknown primitive {node.kind!r}")
        if index in frozen:
            tape.values[node.out] = frozen[index]
            continue
        xs = [tape.values[s] for s in node.inputs]
        try:
            y, ctx = prim.forward(node.attrs, *xs)
        except ValueError as exc:
            raise TapeError(f"node {index} ({node.kind}) on shapes {[x.shape for x in xs]}: {exc}") from exc
        tape.values[node.out] = _as_array(y)
        if ctx is not None:
            tape.ctx[index] = ctx
    tape.evaluated = True
    return {name: tape.values[slot] for name, slot in tape.outputs.items()}


def backward(tape: Tape, output_cotangent, output=None, with_inputs: bool = False) -> dict:
    """Propagate ``output_cotangent`` from ``output`` back through the tape.

    ``output`` may be a :class:`Var`, an output name or ``None`` for the only
    registered output.  Returns a GradStore: ``{param name: gradient}`` for
    every trainable parameter the output depends on.  With ``with_inputs``
    the gradients of named inputs are included as well.
    """
    if not tape.evaluated:
        raise TapeError("backward called before forward evaluation")
    if isinstance(output, Var):
        out_slot = output.slot
    elif output is None:
        if len(tape.outputs) != 1:
            raise TapeError("specify which output to differentiate")
        out_slot = next(iter(tape.outputs.values()))
    else:
        out_slot = tape.outputs[output]
    cot = _as_array(output_cotangent)
    if cot.shape != tape.values[out_slot].shape:
        raise TapeError(f"cotangent shape {cot.shape} != output shape {tape.values[out_slot].shape}")

    grads: dict[int, np.ndarray] = {out_slot: cot}
    for index in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[index]
        gy = grads.pop(node.out, None)
        if gy is None:
            continue
        prim = PRIMITIVES.get(node.kind)
        if prim is None:
            raise TapeError(f"node {index}: unknown primitive {node.kind!r}")
        xs = [tape.values[s] for s in node.inputs]
        gxs = prim.backward(node.attrs, tape.ctx.get(index), xs, tape.values[node.out], gy)
        for slot, g in zip(node.inputs, gxs):
            if g is None:
                continue
            if slot in grads:
                grads[slot] = grads[slot] + g
            else:
                grads[slot] = np.asarray(g, dtype=np.float64)

    store = {}
    for name in sorted(tape.trainable):
        slot = tape.params[name]
        if slot in grads:
            store[name] = grads[slot]
    if with_inputs:
        for name, slot in tape.inputs.items():
            if slot in grads:
                store[name] = grads[slot]
    return store


def finite_difference_check(tape: Tape, point: dict | None = None, step: float = 1e-5,
                            names=None, max_coords: int | None = None, seed: int = 0,
                            freeze_constants: bool = True) -> float:
    """Worst relative error between backward() and central differences.

    ``point`` optionally overrides input/parameter values before checking.
    ``names`` restricts which inputs/parameters are perturbed (default: every
    trainable parameter and every input).  ``max_coords`` caps the number of
    coordinates probed per array; the probed subset is drawn with ``seed``.

    ``step`` may also be a sequence of step sizes; each coordinate is then
    scored at the step where central differences agree best (later steps are
    skipped once a coordinate agrees to 1e-7).  Deep networks
    mix strongly curved coordinates (which want small steps) with tiny
    gradients (which drown in roundoff unless the step is large), and no
    single step serves both.

    With ``freeze_constants`` the outputs of no-gradient nodes (stop-gradient,
    max_nograd, spectral phase) keep their base-point values while probing, so
    the differences measure the same function that :func:`backward`
    differentiates.
    """
    steps = np.atleast_1d(np.asarray(step, dtype=np.float64))
    if steps.size == 0 or np.any(steps <= 0):
        raise ValueError("step must be positive")
    point = dict(point or {})
    in_point = {k: v for k, v in point.items() if k in tape.inputs}
    par_point = {k: v for k, v in point.items() if k in tape.params}
    outs = forward_eval(tape, in_point, par_point)
    if len(outs) != 1:
        raise TapeError("finite_difference_check needs exactly one named output")
    (out_name, out_val), = outs.items()
    if out_val.size != 1:
        raise TapeError(f"output {out_name!r} is not scalar (shape {out_val.shape})")

    analytic = backward(tape, np.ones_like(out_val), with_inputs=True)
    frozen = {}
    if freeze_constants:
        frozen = {i: tape.values[n.out].copy() for i, n in enumerate(tape.nodes)
                  if PRIMITIVES[n.kind].constant}
    if names is None:
        names = sorted(tape.trainable) + sorted(tape.inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names:
        is_input = name in tape.inputs
        base = tape.value(name).copy()
        grad = analytic.get(name, np.zeros_like(base))
        flat_idx = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            flat_idx = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        for i in flat_idx:
            def f_at(offset):
                probe = base.copy().reshape(-1)
                probe[i] += offset
                return _eval_scalar(tape, name, probe.reshape(base.shape), is_input, frozen)

            a = grad.reshape(-1)[i]
            best = np.inf
            for h in steps:
                numeric = (f_at(h) - f_at(-h)) / (2 * h)
                best = min(best, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
                if best < 1e-7:
                    break
            worst = max(worst, best)
        _eval_scalar(tape, name, base, is_input)
    return worst


def _eval_scalar(tape, name, value, is_input, frozen=None):
    if is_input:
        outs = forward_eval(tape, inputs={name: value}, frozen=frozen)
    else:
        outs = forward_eval(tape, params={name: value}, frozen=frozen)
    return float(next(iter(outs.values())).reshape(-1)[0])
