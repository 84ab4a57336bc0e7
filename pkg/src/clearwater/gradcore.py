"""Reverse-mode automatic differentiation over numpy arrays.

A Tape records array-level primitive applications in forward order; backward
replays them in reverse, accumulating vector-Jacobian products. Every op in
this module accepts either Node operands (recorded) or plain ndarrays
(evaluated immediately with no recording), so the same model code serves both
training and inference. Parameters live in a ParamStore keyed by name; leaf
nodes bound to a store write their gradients back through gradient_of.
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

_NORM_FLOOR = 1e-12


class NonFiniteError(ValueError):
    """An op received a non-finite input."""


class TapeError(RuntimeError):
    """Tape misuse: mixed tapes, bad shapes, malformed loss."""


class GradCheckError(RuntimeError):
    """grad_check could not produce a trustworthy comparison."""


def _require_finite(op: str, *arrays) -> None:
    for i, a in enumerate(arrays):
        if a is not None and not np.isfinite(a).all():
            raise NonFiniteError(f"{op}: input {i} contains non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One recorded array value. Leaf nodes may be bound to a store entry."""

    __slots__ = ("value", "grad", "tape", "parents", "vjp", "param_key")

    def __init__(self, value, tape, parents=(), vjp=None, param_key=None):
        self.value = np.asarray(value)
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.param_key = param_key

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other))


class Tape:
    """Ordered record of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_leaves: dict[tuple[int, str], Node] = {}

    def param(self, store: "ParamStore", name: str) -> Node:
        """Leaf node bound to a store entry; cached so repeated use shares one leaf."""
        key = (id(store), name)
        leaf = self._param_leaves.get(key)
        if leaf is None:
            leaf = Node(store.values(name), self, param_key=(store, name))
            self._param_leaves[key] = leaf
            self.nodes.append(leaf)
        return leaf

    def constant(self, value) -> Node:
        node = Node(value, self)
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        self.nodes.clear()
        self._param_leaves.clear()

    def __len__(self):
        return len(self.nodes)


def _tape_of(*operands) -> Tape:
    tape = None
    for x in operands:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands recorded on different tapes")
    if tape is None:
        raise TapeError("no Node operand")
    return tape


def record(op: str, value: np.ndarray, parents: tuple, vjp) -> Node:
    """Append one primitive application to the parents' tape.

    Exposed so other modules can define differentiable ops (the tone-mapping
    curve lives in the color module, for example) without reaching into Tape
    internals. `vjp(g)` must return one gradient per parent, aligned by
    position; None entries mark non-differentiable inputs.
    """
    tape = _tape_of(*parents)
    node = Node(value, tape, parents=tuple(p for p in parents if isinstance(p, Node)), vjp=None)
    node_parents = node.parents
    if len(node_parents) != len(parents):
        # Constant operands were captured in the vjp closure; keep only Node
        # parents but preserve positional alignment through a filter.
        keep = [isinstance(p, Node) for p in parents]

        def filtered(g, _vjp=vjp, _keep=keep):
            outs = _vjp(g)
            return tuple(o for o, k in zip(outs, _keep) if k)

        node.vjp = filtered
    else:
        node.vjp = vjp
    tape.nodes.append(node)
    return node


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x)


def _any_node(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


# ---------------------------------------------------------------------------
# primitives


def affine(x, w, b):
    """y = x @ w + b for a 2-d batch x of shape (n, fan_in).

    Args:
        x: (n, fan_in) input rows.
        w: (fan_in, fan_out) weights.
        b: (fan_out,) bias.

    Returns:
        (n, fan_out) output, recorded if any operand is a Node.
    """
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    _require_finite("affine", xv, wv, bv)
    if xv.ndim != 2 or wv.ndim != 2 or bv.ndim != 1:
        raise ValueError(f"affine: bad ranks x{xv.shape} w{wv.shape} b{bv.shape}")
    out = xv @ wv + bv
    if not _any_node(x, w, b):
        return out

    def vjp(g):
        return (g @ wv.T, xv.T @ g, g.sum(axis=0))

    return record("affine", out, (x, w, b), vjp)


def leaky_relu(x, slope: float = 0.01):
    xv = value_of(x)
    _require_finite("leaky_relu", xv)
    factor = np.where(xv > 0, xv.dtype.type(1), xv.dtype.type(slope))
    out = xv * factor
    if not _any_node(x):
        return out
    return record("leaky_relu", out, (x,), lambda g: (g * factor,))


def relu(x):
    xv = value_of(x)
    _require_finite("relu", xv)
    mask = xv > 0
    out = np.where(mask, xv, xv.dtype.type(0))
    if not _any_node(x):
        return out
    return record("relu", out, (x,), lambda g: (np.where(mask, g, g.dtype.type(0)),))


def clamp_max(x, hi: float):
    """Elementwise min(x, hi); gradient passes only where x <= hi."""
    xv = value_of(x)
    _require_finite("clamp_max", xv)
    mask = xv <= hi
    out = np.where(mask, xv, xv.dtype.type(hi))
    if not _any_node(x):
        return out
    return record("clamp_max", out, (x,), lambda g: (np.where(mask, g, g.dtype.type(0)),))


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # Piecewise form keeps exp() off the overflowing branch.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    xv = value_of(x)
    _require_finite("sigmoid", xv)
    out = _sigmoid_values(xv)
    if not _any_node(x):
        return out
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x):
    xv = value_of(x)
    _require_finite("softplus", xv)
    out = np.logaddexp(xv.dtype.type(0), xv)
    if not _any_node(x):
        return out
    return record("softplus", out, (x,), lambda g: (g * _sigmoid_values(xv),))


def exp(x):
    xv = value_of(x)
    _require_finite("exp", xv)
    out = np.exp(xv)
    if not _any_node(x):
        return out
    return record("exp", out, (x,), lambda g: (g * out,))


def reciprocal(x):
    xv = value_of(x)
    _require_finite("reciprocal", xv)
    out = 1.0 / xv
    if not _any_node(x):
        return out
    return record("reciprocal", out, (x,), lambda g: (-g * out * out,))


def _weak_pair(a, b, av, bv):
    # python scalars adopt the other operand's dtype, mirroring numpy promotion
    if isinstance(a, (bool, int, float)) and not isinstance(b, (bool, int, float)):
        return av.astype(bv.dtype), bv
    if isinstance(b, (bool, int, float)) and not isinstance(a, (bool, int, float)):
        return av, bv.astype(av.dtype)
    return av, bv


def mul(a, b):
    av, bv = _weak_pair(a, b, value_of(a), value_of(b))
    _require_finite("mul", av, bv)
    out = av * bv
    if not _any_node(a, b):
        return out

    def vjp(g):
        return (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))

    return record("mul", out, (a, b), vjp)


def add(a, b):
    av, bv = _weak_pair(a, b, value_of(a), value_of(b))
    _require_finite("add", av, bv)
    out = av + bv
    if not _any_node(a, b):
        return out

    def vjp(g):
        return (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))

    return record("add", out, (a, b), vjp)


def sub(a, b):
    av, bv = _weak_pair(a, b, value_of(a), value_of(b))
    _require_finite("sub", av, bv)
    out = av - bv
    if not _any_node(a, b):
        return out

    def vjp(g):
        return (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape))

    return record("sub", out, (a, b), vjp)


def neg(x):
    xv = value_of(x)
    _require_finite("neg", xv)
    if not _any_node(x):
        return -xv
    return record("neg", -xv, (x,), lambda g: (-g,))


def reduce_sum(x, axis=None, keepdims: bool = False):
    """Summation over the given axis (or all axes when None)."""
    xv = value_of(x)
    _require_finite("sum", xv)
    out = xv.sum(axis=axis, keepdims=keepdims)
    if not _any_node(x):
        return out

    def vjp(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xv.shape),)

    return record("sum", out, (x,), vjp)


def cumsum(x, axis: int):
    """Inclusive running sum along one axis."""
    xv = value_of(x)
    _require_finite("cumsum", xv)
    out = np.cumsum(xv, axis=axis)
    if not _any_node(x):
        return out

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return record("cumsum", out, (x,), vjp)


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    if not _any_node(x):
        return out
    return record("reshape", out, (x,), lambda g: (g.reshape(xv.shape),))


def concat(parts, axis: int = -1):
    values = [value_of(p) for p in parts]
    _require_finite("concat", *values)
    out = np.concatenate(values, axis=axis)
    if not _any_node(*parts):
        return out
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", out, tuple(parts), vjp)


def normalize(x, axis: int = -1):
    """Scale vectors along `axis` to unit Euclidean length.

    Rejects rows whose norm falls at or below 1e-12; callers own keeping their
    inputs away from the degenerate zero vector.
    """
    xv = value_of(x)
    _require_finite("normalize", xv)
    norm = np.linalg.norm(xv, axis=axis, keepdims=True)
    if np.any(norm <= _NORM_FLOOR):
        raise ValueError("normalize: input norm at or below 1e-12")
    out = xv / norm
    if not _any_node(x):
        return out

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * inner) / norm,)

    return record("normalize", out, (x,), vjp)


def cos_angle(u, v):
    """Cosine of the angle between paired vectors along the last axis.

    Args:
        u, v: (..., d) vectors; norms must exceed 1e-12.

    Returns:
        (...) cosines in [-1, 1].
    """
    uv, vv = value_of(u), value_of(v)
    _require_finite("cos_angle", uv, vv)
    nu = np.linalg.norm(uv, axis=-1, keepdims=True)
    nv = np.linalg.norm(vv, axis=-1, keepdims=True)
    if np.any(nu <= _NORM_FLOOR) or np.any(nv <= _NORM_FLOOR):
        raise ValueError("cos_angle: vector norm at or below 1e-12")
    denom = nu * nv
    out = (uv * vv).sum(axis=-1) / denom[..., 0]
    if not _any_node(u, v):
        return out

    def vjp(g):
        ge = g[..., None]
        c = out[..., None]
        du = ge * (vv / denom - c * uv / (nu * nu))
        dv = ge * (uv / denom - c * vv / (nv * nv))
        return (_unbroadcast(du, uv.shape), _unbroadcast(dv, vv.shape))

    return record("cos_angle", out, (u, v), vjp)


def trilerp(table, indices: np.ndarray, weights: np.ndarray):
    """Weighted gather of table rows: out[p] = sum_k table[indices[p, k]] * weights[p, k].

    The gradient flows to the gathered table entries only; indices and weights
    are fixed lookup structure, never differentiated.

    Args:
        table: (rows, features) entries, Node or ndarray.
        indices: (batch, corners) int row indices into the table.
        weights: (batch, corners) interpolation weights.

    Returns:
        (batch, features) interpolated features.
    """
    tv = value_of(table)
    idx = value_of(indices)
    w = value_of(weights)
    _require_finite("trilerp", tv, w)
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= tv.shape[0]:
        raise IndexError(f"trilerp: table index out of range [0, {tv.shape[0]})")
    out = np.einsum("pkf,pk->pf", tv[idx], w)
    if not _any_node(table):
        return out
    rows, feats = tv.shape
    flat = idx.ravel()

    def vjp(g):
        gw = g[:, None, :] * w[:, :, None]
        cols = [
            np.bincount(flat, weights=gw[:, :, f].ravel(), minlength=rows)
            for f in range(feats)
        ]
        return (np.stack(cols, axis=1).astype(tv.dtype, copy=False),)

    return record("trilerp", out, (table,), vjp)


PRIMITIVES = {
    "affine": affine,
    "leaky_relu": leaky_relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "exp": exp,
    "mul": mul,
    "sum": reduce_sum,
    "reciprocal": reciprocal,
    "normalize": normalize,
    "cos_angle": cos_angle,
    "trilerp": trilerp,
}


def primitive_forward_backward(op: str, *inputs, **kwargs):
    """Apply one named primitive and return (value, input sensitivities).

    Sensitivities are the vector-Jacobian products under a unit upstream
    gradient (ones shaped like the output), one entry per differentiable
    input, None where no gradient is defined.
    """
    if op not in PRIMITIVES:
        raise KeyError(f"unknown primitive {op!r}; have {sorted(PRIMITIVES)}")
    tape = Tape()
    nodes = []
    for x in inputs:
        arr = np.asarray(x)
        if np.issubdtype(arr.dtype, np.floating):
            nodes.append(tape.constant(arr))
        else:
            nodes.append(arr)  # integer index arrays stay plain
    out = PRIMITIVES[op](*nodes, **kwargs)
    out.grad = np.ones_like(out.value)
    _sweep(tape, out)
    grads = tuple(n.grad if isinstance(n, Node) else None for n in nodes)
    return out.value, grads


# ---------------------------------------------------------------------------
# parameters and backward


class ParamStore:
    """Named parameter arrays with paired gradient accumulators.

    Iteration and serialization order is lexicographic by name so every
    downstream consumer (optimizer, checkpoints, grad_check) sees one stable
    ordering.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, values, dtype=np.float32) -> None:
        if name in self._values:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.array(values, dtype=dtype)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return sorted(self._values)

    def values(self, name: str) -> np.ndarray:
        return self._values[name]

    def grads(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_values(self, name: str, values: np.ndarray) -> None:
        cur = self._values[name]
        arr = np.asarray(values, dtype=cur.dtype)
        if arr.shape != cur.shape:
            raise ValueError(f"{name}: shape {arr.shape} != {cur.shape}")
        self._values[name] = arr

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        cur = self._grads[name]
        if g.shape != cur.shape:
            raise TapeError(f"{name}: gradient shape {g.shape} != {cur.shape}")
        self._grads[name] = cur + g.astype(cur.dtype, copy=False)

    def zero_grads(self) -> None:
        for name, g in self._grads.items():
            self._grads[name] = np.zeros_like(g)

    def clone(self, dtype=None) -> "ParamStore":
        out = ParamStore()
        for name in self.names():
            v = self._values[name]
            out.add(name, v.copy(), dtype=dtype or v.dtype)
        return out

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def total_size(self) -> int:
        return sum(v.size for v in self._values.values())


class EvalContext:
    """Parameter access for one forward pass: recorded when a tape is present."""

    def __init__(self, store: ParamStore, tape: Tape | None = None):
        self.store = store
        self.tape = tape

    def param(self, name: str):
        if self.tape is None:
            return self.store.values(name)
        return self.tape.param(self.store, name)


def _sweep(tape: Tape, loss: Node) -> None:
    for n in tape.nodes:
        if n is not loss:
            n.grad = None
    for node in reversed(tape.nodes):
        if node.grad is None or node.vjp is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            if g.shape != parent.value.shape:
                raise TapeError(
                    f"vjp shape {g.shape} != parent shape {parent.value.shape}"
                )
            parent.grad = g if parent.grad is None else parent.grad + g


def gradient_of(loss: Node, store: ParamStore) -> ParamStore:
    """Backpropagate from a scalar loss, accumulating into store gradients.

    Repeated calls add up; call store.zero_grads() between optimization steps.
    Parameters the loss never touched keep an exactly zero gradient.
    """
    if not isinstance(loss, Node):
        raise TapeError("loss is not a recorded Node")
    if loss.value.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
    _require_finite("gradient_of", loss.value)
    loss.grad = np.ones_like(loss.value)
    _sweep(loss.tape, loss)
    for (sid, name), leaf in loss.tape._param_leaves.items():
        if sid == id(store) and leaf.grad is not None:
            store.accumulate_grad(name, leaf.grad)
    return store


def grad_check(fn, store: ParamStore, step: float = 1e-4, tol: float = 1e-3) -> float:
    """Compare analytic gradients of fn against central finite differences.

    The whole evaluation is redone in float64 (production stores are float32),
    fn is evaluated twice at the base point to reject non-deterministic
    functions, then every parameter element is probed at +/- step.

    Args:
        fn: callable(EvalContext) -> scalar Node (taped) or 0-d array (untaped).
        store: parameters to probe; left untouched.
        step: central-difference half step, required inside (1e-8, 1e-2).
        tol: advisory threshold; exceeding it logs the worst offender.

    Returns:
        max over parameter elements of |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    if not (1e-8 < step < 1e-2):
        raise ValueError(f"step {step} outside (1e-8, 1e-2)")
    work = store.clone(dtype=np.float64)

    def evaluate() -> float:
        out = fn(EvalContext(work, tape=None))
        arr = value_of(out)
        if arr.size != 1:
            raise GradCheckError(f"fn returned shape {arr.shape}, expected scalar")
        return float(arr)

    base1 = evaluate()
    base2 = evaluate()
    if base1 != base2:
        raise GradCheckError(
            f"fn is not deterministic at the base point ({base1!r} != {base2!r})"
        )

    tape = Tape()
    loss = fn(EvalContext(work, tape))
    if not isinstance(loss, Node):
        raise GradCheckError("fn did not route parameters through the tape")
    work.zero_grads()
    gradient_of(loss, work)

    worst = 0.0
    worst_at = ("", 0)
    for name in work.names():
        values = work.values(name)
        analytic = work.grads(name)
        flat = values.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = evaluate()
            flat[i] = orig - step
            lo = evaluate()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            a = float(aflat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > worst:
                worst = rel
                worst_at = (name, i)
    if worst > tol:
        log.warning(
            "grad_check: max relative error %.3e at %s[%d] exceeds tol %.1e",
            worst, worst_at[0], worst_at[1], tol,
        )
    return worst
