"""Reverse-mode automatic differentiation over batched numpy arrays.

A :class:`Tape` records every operation applied to :class:`Var` objects as an
append-only list of nodes (value, parent indices, vector-Jacobian products).
``Tape.backward`` walks the list once in reverse and accumulates parameter
gradients into the owning :class:`ParamStore`.

All free functions here (``tanh``, ``exp``, ``sum`` ...) also accept plain
numpy arrays and then simply evaluate, so model code can run with or without
a tape through a single code path.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

CHECKPOINT_FORMAT = "snfkit-checkpoint"
CHECKPOINT_VERSION = 1


class ContractViolation(ValueError):
    """An operation was called outside of its documented preconditions."""


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Var:
    """A node on a tape."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var's reflected ops

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)


def value_of(x):
    """Strip the tape from ``x`` (a stop-gradient)."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


class Tape:
    """Append-only record of operations for one batch of trajectories."""

    def __init__(self):
        self.values = []
        self.parents = []
        self.vjps = []
        self._param_nodes = {}
        self._param_sinks = {}

    def __len__(self):
        return len(self.values)

    def record(self, value, parents=(), vjps=()):
        node = Var(self, len(self.values), value)
        self.values.append(value)
        self.parents.append(tuple(p.index for p in parents))
        self.vjps.append(tuple(vjps))
        return node

    def constant(self, value):
        return self.record(np.asarray(value, dtype=np.float64))

    def param(self, store, name):
        """Leaf node for parameter segment ``name`` (one node per tape)."""
        key = (id(store), name)
        node = self._param_nodes.get(key)
        if node is None:
            node = self.record(store.view(name))
            self._param_nodes[key] = node
            self._param_sinks[node.index] = (store, name)
        return node

    def backward(self, root, seed=1.0):
        """Accumulate d(root)/d(param) into each parameter store's ``grad``."""
        if not isinstance(root, Var) or root.tape is not self:
            raise ContractViolation("backward root must be a Var on this tape")
        if np.ndim(root.value) != 0:
            raise ContractViolation(f"backward root must be scalar, got shape {np.shape(root.value)}")
        grads = [None] * (root.index + 1)
        grads[root.index] = np.asarray(seed, dtype=np.float64)
        for i in range(root.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            sink = self._param_sinks.get(i)
            if sink is not None:
                store, name = sink
                store.grad_view(name)[...] += g
            for p, vjp in zip(self.parents[i], self.vjps[i]):
                contrib = vjp(g)
                grads[p] = contrib if grads[p] is None else grads[p] + contrib
        return grads


def _lift(tape, x):
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.add(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(a.value + b.value, (a, b),
                       (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def neg(a):
    if not isinstance(a, Var):
        return np.negative(a)
    return a.tape.record(-a.value, (a,), (lambda g: -g,))


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.multiply(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       (lambda g: _unbroadcast(g * bv, av.shape),
                        lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.divide(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape.record(out, (a, b),
                       (lambda g: _unbroadcast(g / bv, av.shape),
                        lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def power(a, exponent):
    if not isinstance(a, Var):
        return np.power(a, exponent)
    av = a.value
    if exponent == 2:
        return a.tape.record(av * av, (a,), (lambda g: 2.0 * g * av,))
    return a.tape.record(av ** exponent, (a,), (lambda g: g * exponent * av ** (exponent - 1),))


def square(a):
    return power(a, 2)


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.matmul(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ContractViolation("matmul supports 2-D operands only")
    return tape.record(av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


def tanh(a):
    if not isinstance(a, Var):
        return np.tanh(a)
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), (lambda g: g * (1.0 - out * out),))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(a)
    out = np.exp(a.value)
    return a.tape.record(out, (a,), (lambda g: g * out,))


def log(a):
    if not isinstance(a, Var):
        return np.log(a)
    av = a.value
    return a.tape.record(np.log(av), (a,), (lambda g: g / av,))


def sum(a, axis=None):  # noqa: A001
    if not isinstance(a, Var):
        return np.sum(a, axis=axis)
    shape = a.value.shape
    out = np.sum(a.value, axis=axis)
    if axis is None:
        return a.tape.record(out, (a,), (lambda g: np.broadcast_to(g, shape).copy(),))
    return a.tape.record(out, (a,),
                         (lambda g: np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a, axis=None):
    n = value_of(a).size if axis is None else value_of(a).shape[axis]
    return sum(a, axis=axis) * (1.0 / n)


def take(a, key):
    if not isinstance(a, Var):
        return np.asarray(a)[key]
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return out

    return a.tape.record(a.value[key], (a,), (vjp,))


def concat(parts, axis=-1):
    tape = _tape_of(*parts)
    if tape is None:
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    parts = [_lift(tape, p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    vjps = []
    for k in range(len(parts)):
        lo, hi = int(bounds[k]), int(bounds[k + 1])
        vjps.append(lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis))
    return tape.record(np.concatenate([p.value for p in parts], axis=axis), parts, vjps)


def log_density(model, x):
    """``model.log_density`` as a tape primitive; per-sample values, shape (n,)."""
    if not isinstance(x, Var):
        return model.log_density(np.asarray(x, dtype=np.float64))
    xv = x.value
    out = model.log_density(xv)
    return x.tape.record(out, (x,), (lambda g: g[:, None] * model.grad_log_density(xv),))


def grad_log_density(model, x):
    """The score of ``model`` at ``x``; its VJP is a Hessian-vector product."""
    if not isinstance(x, Var):
        return model.grad_log_density(np.asarray(x, dtype=np.float64))
    xv = x.value
    out = model.grad_log_density(xv)
    return x.tape.record(out, (x,),
                         (lambda g: np.einsum("nij,nj->ni", model.hess_log_density(xv), g),))


def gaussian_diag_log_density(x, mean_, log_var):
    """Row-wise log N(x; mean, diag(exp(log_var))), differentiable in all arguments."""
    d = value_of(x).shape[-1]
    resid = x - mean_
    return (-0.5 * d * math.log(2.0 * math.pi)
            - 0.5 * sum(log_var, axis=-1)
            - 0.5 * sum(resid * resid * exp(-log_var), axis=-1))


def gaussian_iso_log_density(x, mean_, var):
    """Row-wise log N(x; mean, var * I) for a fixed scalar variance."""
    d = value_of(x).shape[-1]
    resid = x - mean_
    return -0.5 * d * math.log(2.0 * math.pi * var) - sum(resid * resid, axis=-1) * (0.5 / var)


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def slice(self):
        return slice(self.offset, self.offset + self.size)


class ParamStore:
    """Flat parameter and gradient vectors split into named segments."""

    def __init__(self):
        self.data = np.zeros(0)
        self.grad = np.zeros(0)
        self.segments = {}

    def __len__(self):
        return self.data.size

    def add(self, name, shape, init=None):
        if name in self.segments:
            raise ContractViolation(f"duplicate parameter segment {name!r}")
        shape = tuple(int(s) for s in shape)
        seg = Segment(name, shape, self.data.size)
        values = np.zeros(seg.size) if init is None else np.asarray(init, dtype=np.float64).reshape(-1)
        if values.size != seg.size:
            raise ContractViolation(f"init for {name!r} has {values.size} entries, expected {seg.size}")
        self.data = np.concatenate([self.data, values])
        self.grad = np.concatenate([self.grad, np.zeros(seg.size)])
        self.segments[name] = seg
        return seg

    def view(self, name):
        seg = self.segments[name]
        return self.data[seg.slice].reshape(seg.shape)

    def grad_view(self, name):
        seg = self.segments[name]
        return self.grad[seg.slice].reshape(seg.shape)

    def zero_grad(self):
        self.grad[...] = 0.0

    def segment_of(self, index):
        for seg in self.segments.values():
            if seg.offset <= index < seg.offset + seg.size:
                return seg.name
        raise IndexError(index)

    def to_dict(self):
        return {
            "segments": [{"name": s.name, "shape": list(s.shape), "offset": s.offset}
                         for s in self.segments.values()],
            "params": self.data.tolist(),
        }

    def load_dict(self, payload):
        """Load parameters written by :meth:`to_dict`; layouts must match exactly."""
        mine = [(s.name, list(s.shape), s.offset) for s in self.segments.values()]
        theirs = [(s["name"], list(s["shape"]), s["offset"]) for s in payload["segments"]]
        if mine != theirs:
            raise ContractViolation("checkpoint parameter layout does not match the model")
        params = np.asarray(payload["params"], dtype=np.float64)
        if params.shape != self.data.shape:
            raise ContractViolation("checkpoint parameter count does not match the model")
        self.data[...] = params


def save_checkpoint(path, store, config=None, extra=None):
    """Write a JSON checkpoint; floats use shortest round-trip repr (bit-exact)."""
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    payload.update(store.to_dict())
    if config is not None:
        payload["config"] = config
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh)


def read_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractViolation(f"{path}: not an snfkit checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


class Mlp:
    """Fully connected tanh network whose weights live in a ParamStore.

    ``widths`` lists the layer sizes from input to output. The last layer is
    linear. ``zero_last`` zero-initializes the final weights and bias so the
    network starts as the zero map.
    """

    def __init__(self, store, prefix, widths, rng=None, zero_last=True, init_scale=1.0):
        if len(widths) < 2:
            raise ContractViolation("an Mlp needs at least input and output widths")
        self.store = store
        self.prefix = prefix
        self.widths = [int(w) for w in widths]
        self.names = []
        n_layers = len(self.widths) - 1
        for k, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            w_name, b_name = f"{prefix}.W{k}", f"{prefix}.b{k}"
            last = k == n_layers - 1
            if rng is None or (last and zero_last):
                w_init = None
            else:
                w_init = rng.normal(scale=init_scale / math.sqrt(max(fan_in, 1)), size=(fan_in, fan_out))
            store.add(w_name, (fan_in, fan_out), w_init)
            store.add(b_name, (fan_out,))
            self.names.append((w_name, b_name))

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def __call__(self, x, tape=None):
        if tape is None:
            tape = x.tape if isinstance(x, Var) else None
        width = value_of(x).shape[-1]
        if width != self.in_dim:
            raise ContractViolation(f"{self.prefix}: expected input width {self.in_dim}, got {width}")
        h = x
        last = len(self.names) - 1
        for k, (w_name, b_name) in enumerate(self.names):
            if tape is None:
                w, b = self.store.view(w_name), self.store.view(b_name)
            else:
                w, b = tape.param(self.store, w_name), tape.param(self.store, b_name)
                h = _lift(tape, h)
            h = matmul(h, w) + b
            if k < last:
                h = tanh(h)
        return h


class Adam:
    """Bias-corrected adaptive-moment optimizer acting on a whole ParamStore."""

    def __init__(self, store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros_like(store.data)
        self.v = np.zeros_like(store.data)
        self.step_count = 0

    def step(self):
        adam_step(self.store, self.m, self.v, self.lr, self.beta1, self.beta2, self.eps,
                  self.step_count + 1)
        self.step_count += 1


def adam_step(store, m, v, lr, beta1, beta2, eps, step_count):
    """One in-place Adam update of ``store.data`` from ``store.grad``."""
    if step_count < 1:
        raise ContractViolation("step_count must be >= 1")
    g = store.grad
    bad = ~np.isfinite(g)
    if bad.any():
        names = sorted({store.segment_of(int(i)) for i in np.flatnonzero(bad)})
        raise FloatingPointError(f"non-finite gradient in segment(s): {', '.join(names)}")
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** step_count)
    v_hat = v / (1.0 - beta2 ** step_count)
    store.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
