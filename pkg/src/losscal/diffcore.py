"""Minimal reverse-mode differentiation over a recorded operation tape.

A :class:`Tape` is built once as a symbolic graph (leaves plus primitive
ops), then bound to concrete arrays with :meth:`Tape.forward` and
differentiated with :meth:`Tape.backward`.  Leaves come in three kinds:

* ``param`` -- model parameters, differentiable
* ``input`` -- data samples, differentiable (needed for input perturbation)
* ``const`` -- labels, masks, index sets; never differentiated

All arithmetic is float64.  Nodes are appended in creation order, which is
also a valid topological order because every operand must already exist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAF_KINDS = ("param", "input", "const")


class TapeError(RuntimeError):
    """Raised for unbound leaves, shape mismatches and misuse of the tape."""


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None

    def label(self, idx):
        return f"#{idx} {self.op}" + (f" '{self.name}'" if self.name else "")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    if z.dtype == object:  # mpmath values from the high-precision oracle
        import mpmath

        total = np.frompyfunc(mpmath.exp, 1, 1)(s).sum(axis=-1, keepdims=True)
        return s - np.frompyfunc(mpmath.log, 1, 1)(total)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


# Each rule: forward(values, attrs) -> out ; backward(g, values, out, attrs) -> grads per input
def _fwd_affine(v, a):
    x, w, b = v
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ValueError(f"affine expects x[n,d], W[d,h], b[h]; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"affine shapes do not chain: x{x.shape} W{w.shape} b{b.shape}")
    return x @ w + b


def _bwd_affine(g, v, out, a):
    x, w, _ = v
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _fwd_binary(fn):
    def fwd(v, a):
        try:
            np.broadcast_shapes(v[0].shape, v[1].shape)
        except ValueError:
            raise ValueError(f"cannot broadcast {v[0].shape} with {v[1].shape}") from None
        return fn(v[0], v[1])
    return fwd


def _bwd_add(g, v, out, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _bwd_sub(g, v, out, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)


def _bwd_mul(g, v, out, a):
    return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)


def _fwd_concat(v, a):
    rows = {x.shape[0] for x in v}
    if len(rows) != 1 or any(x.ndim != 2 for x in v):
        raise ValueError(f"concat needs 2-d operands with equal rows; got {[x.shape for x in v]}")
    return np.concatenate(v, axis=1)


def _bwd_concat(g, v, out, a):
    cuts = np.cumsum([x.shape[1] for x in v])[:-1]
    return tuple(np.split(g, cuts, axis=1))


def _fwd_pick(v, a):
    x, idx = v
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ValueError(f"pick expects x[n,K] and idx[n]; got {x.shape}, {idx.shape}")
    idx = idx.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ValueError("pick index out of range")
    return x[np.arange(x.shape[0]), idx]


def _bwd_pick(g, v, out, a):
    x, idx = v
    gx = np.zeros_like(x)
    gx[np.arange(x.shape[0]), idx.astype(np.int64)] = g
    return gx, None


def _fwd_take(v, a):
    x, idx = v
    if x.ndim != 1:
        raise ValueError(f"take expects a 1-d operand; got {x.shape}")
    idx = idx.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ValueError("take index out of range")
    return x[idx]


def _bwd_take(g, v, out, a):
    x, idx = v
    gx = np.zeros_like(x)
    np.add.at(gx, idx.astype(np.int64), g)
    return gx, None


def _fwd_reshape(v, a):
    x = v[0]
    shape = tuple(x.shape[0] if s == "n" else s for s in a["shape"])
    try:
        return x.reshape(shape)
    except ValueError:
        raise ValueError(f"cannot reshape {x.shape} to {shape}") from None


def _fwd_indicator(v, a):
    x, y = v
    if x.shape != y.shape:
        raise ValueError(f"indicator operands differ in shape: {x.shape} vs {y.shape}")
    return np.where(x > y, 1.0, -1.0)


_RULES = {
    "affine": (_fwd_affine, _bwd_affine),
    "add": (_fwd_binary(np.add), _bwd_add),
    "sub": (_fwd_binary(np.subtract), _bwd_sub),
    "mul": (_fwd_binary(np.multiply), _bwd_mul),
    "scale": (lambda v, a: v[0] * a["c"], lambda g, v, o, a: (g * a["c"],)),
    "shift": (lambda v, a: v[0] + a["c"], lambda g, v, o, a: (g,)),
    "neg": (lambda v, a: -v[0], lambda g, v, o, a: (-g,)),
    "relu": (lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: (g * (v[0] > 0),)),
    "square": (lambda v, a: v[0] * v[0], lambda g, v, o, a: (2.0 * g * v[0],)),
    "log_softmax": (lambda v, a: _log_softmax(v[0]),
                    lambda g, v, o, a: (g - np.exp(o) * g.sum(axis=-1, keepdims=True),)),
    "concat": (_fwd_concat, _bwd_concat),
    "pick": (_fwd_pick, _bwd_pick),
    "take": (_fwd_take, _bwd_take),
    "sum": (lambda v, a: np.asarray(v[0].sum()), lambda g, v, o, a: (np.full_like(v[0], g),)),
    "mean": (lambda v, a: np.asarray(v[0].mean()),
             lambda g, v, o, a: (np.full_like(v[0], g / v[0].size),)),
    "reshape": (_fwd_reshape, lambda g, v, o, a: (g.reshape(v[0].shape),)),
    # zero-gradient ops; grad_check holds them fixed
    "detach": (lambda v, a: v[0].copy(), lambda g, v, o, a: (None,)),
    "indicator": (_fwd_indicator, lambda g, v, o, a: (None, None)),
}

ZERO_GRAD_OPS = frozenset({"detach", "indicator"})


class Tape:
    """Recorded graph of primitive ops over named leaves.

    Builder methods return integer node handles.  The last created node is
    the output unless :meth:`set_output` says otherwise.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}
        self.output: int | None = None
        self._values: list[np.ndarray] | None = None

    # -- construction ---------------------------------------------------
    def _leaf(self, name, kind):
        if name in self.leaves:
            raise TapeError(f"leaf '{name}' already declared")
        self.nodes.append(Node("leaf", attrs={"kind": kind}, name=name))
        self.leaves[name] = len(self.nodes) - 1
        return self.leaves[name]

    def param(self, name):
        return self._leaf(name, "param")

    def input(self, name):
        return self._leaf(name, "input")

    def const(self, name):
        return self._leaf(name, "const")

    def op(self, op, *inputs, name=None, **attrs):
        if op not in _RULES:
            raise TapeError(f"unknown op '{op}'")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise TapeError(f"operand #{i} does not exist yet")
        self.nodes.append(Node(op, tuple(inputs), attrs, name))
        self.output = len(self.nodes) - 1
        self._values = None
        return self.output

    def set_output(self, node):
        self.output = node

    def __getattr__(self, op):
        # tape.relu(h), tape.affine(x, w, b), tape.scale(x, c=2.0), ...
        if op in _RULES:
            return lambda *inputs, name=None, **attrs: self.op(op, *inputs, name=name, **attrs)
        raise AttributeError(op)

    def leaf_kind(self, name):
        return self.nodes[self.leaves[name]].attrs["kind"]

    def differentiable_leaves(self):
        return [n for n, i in self.leaves.items() if self.nodes[i].attrs["kind"] != "const"]

    # -- evaluation -----------------------------------------------------
    def forward(self, bindings, frozen=None):
        """Evaluate every node and return the output value.

        Intermediates stay cached for :meth:`backward` and :meth:`value`.
        ``frozen`` maps node handles to values used instead of recomputing.
        Leaves are coerced to float64 unless already longdouble or object
        arrays (the finite-difference oracle's higher-precision modes).
        """
        values = []
        for idx, node in enumerate(self.nodes):
            if frozen and idx in frozen:
                values.append(frozen[idx])
                continue
            if node.op == "leaf":
                if node.name not in bindings:
                    raise TapeError(f"leaf '{node.name}' is not bound")
                v = np.asarray(bindings[node.name])
                if v.dtype != np.longdouble and v.dtype != object:
                    v = v.astype(np.float64)
                values.append(v)
                continue
            fwd = _RULES[node.op][0]
            try:
                out = fwd([values[i] for i in node.inputs], node.attrs)
            except ValueError as exc:
                raise TapeError(f"{node.label(idx)}: {exc}") from None
            values.append(out if isinstance(out, np.ndarray) else np.asarray(out))
        self._values = values
        return values[self.output]

    def value(self, node):
        if self._values is None:
            raise TapeError("forward has not been run")
        return self._values[node]

    def kink_distance(self):
        """Smallest |argument| over all ReLU nodes in the last forward pass.

        Finite differences are unreliable when this is comparable to the step.
        """
        if self._values is None:
            raise TapeError("forward has not been run")
        dists = [np.abs(self._values[n.inputs[0]]).min() for n in self.nodes if n.op == "relu"]
        return float(min(dists, default=np.inf))

    def backward(self, seed=1.0):
        """Gradients of the (scalar) output w.r.t. every param and input leaf."""
        if self._values is None:
            raise TapeError("backward called before forward")
        out = self._values[self.output]
        if out.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {out.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[self.output] = np.full_like(out, float(seed))
        for idx in range(self.output, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.op == "leaf":
                continue
            operands = [self._values[i] for i in node.inputs]
            parts = _RULES[node.op][1](g, operands, self._values[idx], node.attrs)
            for i, part in zip(node.inputs, parts):
                if part is None:
                    continue
                grads[i] = part if grads[i] is None else grads[i] + part
        result = {}
        for name, i in self.leaves.items():
            kind = self.nodes[i].attrs["kind"]
            if kind == "const":
                continue
            g = grads[i]
            result[name] = np.zeros_like(self._values[i]) if g is None else np.asarray(g, dtype=np.float64)
        return result


def forward(tape, bindings):
    return tape.forward(bindings)


def backward(tape, seed=1.0):
    return tape.backward(seed)


def _to_mp(arr):
    import mpmath

    return np.array(np.frompyfunc(mpmath.mpf, 1, 1)(np.asarray(arr, dtype=np.float64)), dtype=object)


def grad_check(tape, bindings, epsilon=1e-6, leaves=None, per_leaf=False, recheck_above=1e-7, mp_digits=40):
    """Compare backward gradients against central finite differences.

    Every coordinate of every differentiable leaf (or just ``leaves``) is
    perturbed.  Zero-gradient nodes (``detach``, ``indicator``) keep their
    unperturbed values, matching the constants the backward pass assumes.

    Differences are taken in extended precision; any coordinate whose error
    still exceeds ``recheck_above`` is re-evaluated with ``mp_digits``-digit
    mpmath arithmetic, so that cancellation noise on (near-)zero gradients is
    not mistaken for a wrong derivative.

    Returns the maximum relative error, with denominator
    ``max(|analytic|, |numeric|, 1e-8)``; with ``per_leaf=True`` returns
    ``(max_error, {leaf: max_error})`` instead.
    """
    import mpmath

    tape.forward(bindings)
    analytic = tape.backward(1.0)
    frozen = {i: tape.value(i) for i, n in enumerate(tape.nodes) if n.op in ZERO_GRAD_OPS}
    names = list(leaves) if leaves is not None else tape.differentiable_leaves()
    base = {k: np.asarray(v, dtype=np.float64) for k, v in bindings.items()}
    for name in names:
        base[name] = base[name].astype(np.longdouble)
    mp_base = None
    step = np.longdouble(epsilon)

    def central(env, flat, k, h):
        orig = flat[k]
        flat[k] = orig + h
        up = tape.forward(env, frozen)
        flat[k] = orig - h
        down = tape.forward(env, frozen)
        flat[k] = orig
        return (up - down) / (2 * h)

    def rel(a, num):
        return abs(a - num) / max(abs(a), abs(num), 1e-8)

    errors = {}
    for name in names:
        flat = base[name].reshape(-1)
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            err = rel(ga[k], float(central(base, flat, k, step)))
            if err > recheck_above:
                if mp_base is None:
                    mp_base = dict(base)
                    for leaf in names:
                        mp_base[leaf] = _to_mp(base[leaf])
                with mpmath.workdps(mp_digits):
                    num = central(mp_base, mp_base[name].reshape(-1), k, mpmath.mpf(epsilon))
                    err = rel(ga[k], float(num))
            worst = max(worst, err)
        errors[name] = worst
    tape.forward(bindings)
    worst_all = max(errors.values(), default=0.0)
    return (worst_all, errors) if per_leaf else worst_all
