"""Reverse-mode automatic differentiation on numpy arrays.

Every op in this module accepts plain arrays or :class:`Tensor` objects.  With
plain arrays it simply computes the value and returns an ndarray, so the same
model code serves both the recorded (training) and the unrecorded (evaluation)
path.  As soon as one argument is a Tensor the result is a Tensor that remembers
its parents and a vector-Jacobian product.

Node ids come from a global counter, so creation order is a topological order
of the graph and :func:`backward` never needs recursion.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

_ids = itertools.count()
_kinks = threading.local()


@contextmanager
def record_kinks():
    """Collect the sign pattern of every ReLU / abs input evaluated inside the block."""
    log: list = []
    prev = getattr(_kinks, "log", None)
    _kinks.log = log
    try:
        yield log
    finally:
        _kinks.log = prev


def _note_kink(pattern: np.ndarray) -> None:
    log = getattr(_kinks, "log", None)
    if log is not None:
        log.append(np.packbits(pattern).tobytes())


class Tensor:
    __slots__ = ("value", "parents", "vjp", "name", "id")

    def __init__(self, value, parents: tuple = (), vjp: Callable | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def leaf(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), name=name)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _traced(*args) -> bool:
    return any(isinstance(a, Tensor) for a in args)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(out, args, vjp) -> Tensor:
    parents = tuple(a if isinstance(a, Tensor) else None for a in args)
    return Tensor(out, parents, vjp)


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    if not _traced(a, b):
        return out
    return _make(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    if not _traced(a, b):
        return out
    return _make(out, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    if not _traced(a, b):
        return out
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float):
    out = value(a) * c
    if not _traced(a):
        return out
    return _make(out, (a,), lambda g: (g * c,))


def square(a):
    av = value(a)
    out = av * av
    if not _traced(a):
        return out
    return _make(out, (a,), lambda g: (2.0 * av * g,))


def absolute(a):
    """|a| with subgradient 0 at a == 0."""
    av = value(a)
    out = np.abs(av)
    _note_kink(av > 0.0)
    if not _traced(a):
        return out
    return _make(out, (a,), lambda g: (np.sign(av) * g,))


def sqrt(a):
    """Square root; the gradient at exactly 0 is taken as 0."""
    out = np.sqrt(value(a))
    if not _traced(a):
        return out

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)

    return _make(out, (a,), vjp)


def relu(a):
    """max(a, 0); gradient at exactly 0 is 0."""
    av = value(a)
    mask = av > 0.0
    _note_kink(mask)
    out = np.where(mask, av, 0.0)
    if not _traced(a):
        return out
    return _make(out, (a,), lambda g: (g * mask,))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    """a @ b for a of shape (..., n, m) or (..., m) and b of shape (m, p) or (m,)."""
    av, bv = value(a), value(b)
    out = av @ bv
    if not _traced(a, b):
        return out

    def vjp(g):
        if bv.ndim == 1:
            ga = g[..., None] * bv if av.ndim > 1 else g * bv
            gb = (av * g[..., None]).reshape(-1, bv.shape[0]).sum(axis=0) if av.ndim > 1 else g * av
        else:
            ga = g @ bv.T
            a2 = av.reshape(-1, av.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(out, (a, b), vjp)


def matvec(A, x):
    """A x applied along the last axis of x: x @ A.T."""
    Av, xv = value(A), value(x)
    out = xv @ Av.T
    if not _traced(A, x):
        return out

    def vjp(g):
        gA = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        return gA, g @ Av

    return _make(out, (A, x), vjp)


def dot(a, b):
    """Inner product over the last axis."""
    av, bv = value(a), value(b)
    out = (av * bv).sum(axis=-1)
    if not _traced(a, b):
        return out

    def vjp(g):
        g = np.asarray(g)[..., None]
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(out, (a, b), vjp)


def affine(x, W, b):
    """x @ W.T + b for x of shape (batch, in), W (out, in), b (out,)."""
    xv, Wv, bv = value(x), value(W), value(b)
    out = xv @ Wv.T + bv
    if not _traced(x, W, b):
        return out

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, xv.shape[-1])
        return g @ Wv, g2.T @ x2, g2.sum(axis=0)

    return _make(out, (x, W, b), vjp)


# -- reductions and structure --------------------------------------------------

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    av = value(a)
    out = av.sum(axis=axis)
    if not _traced(a):
        return out

    def vjp(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a, axis=None):
    av = value(a)
    n = av.size if axis is None else av.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def stack(items: Sequence, axis: int = 0):
    vals = [value(t) for t in items]
    out = np.stack(vals, axis=axis)
    if not _traced(*items):
        return out

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return _make(out, tuple(items), vjp)


def concat(items: Sequence, axis: int = -1):
    vals = [value(t) for t in items]
    out = np.concatenate(vals, axis=axis)
    if not _traced(*items):
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(items), vjp)


def take(a, index):
    av = value(a)
    out = av[index]
    if not _traced(a):
        return out

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), vjp)


def custom(out, inputs: Sequence, vjp: Callable):
    """Record an op whose value was computed elsewhere, e.g. by a compiled kernel."""
    if not _traced(*inputs):
        return out
    return _make(out, tuple(inputs), vjp)


# -- gradients -----------------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen = {root.id: root}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        for p in node.parents:
            if p is not None and p.id not in seen:
                seen[p.id] = p
                stack_.append(p)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def backward(loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with respect to the named leaf tensors.

    Leaves that do not influence the loss get a zero gradient.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss was not recorded on a tape (no Tensor inputs)")
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    keep = {t.id for t in wrt.values()}
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node in _reachable(loss):
        g = grads.get(node.id) if node.id in keep else grads.pop(node.id, None)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=np.float64)
    return {
        name: np.array(grads[t.id]).reshape(t.shape) if t.id in grads else np.zeros_like(t.value)
        for name, t in wrt.items()
    }


def value_and_grad(f: Callable, params: Mapping[str, np.ndarray]):
    leaves = {k: leaf(v, name=k) for k, v in params.items()}
    loss = f(leaves)
    return float(value(loss)), backward(loss, leaves)


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int

    def __float__(self):
        return self.max_rel_error


def grad_check(
    f: Callable,
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    skip_kinks: bool = True,
    report: bool = False,
):
    """Largest relative error between tape gradients and central differences.

    ``f`` maps a dict of arrays (or Tensors) to a scalar.  The error for one
    coordinate is |a - n| / max(|a|, |n|, 1e-12).  When ``max_coords`` is given,
    about that many coordinates are checked, spread over every tensor and drawn
    with a fixed seed; otherwise every coordinate is checked.

    With ``skip_kinks`` a coordinate whose +-eps evaluations change the sign
    pattern of any ReLU/abs input is replaced by another draw: a central
    difference straddling a kink does not estimate the derivative.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with record_kinks() as base_pattern:
        _, analytic = value_and_grad(f, params)
    rng = np.random.default_rng(seed)
    total = int(np.sum([v.size for v in params.values()]))
    worst, checked, skipped = 0.0, 0, 0

    def evaluate(name, arr, c, delta):
        trial = dict(params)
        flat = arr.copy().reshape(-1)
        flat[c] += delta
        trial[name] = flat.reshape(arr.shape)
        with record_kinks() as pattern:
            out = float(value(f(trial)))
        return out, pattern

    for name, arr in params.items():
        if max_coords is None or total <= max_coords:
            order = np.arange(arr.size)
            want = arr.size
        else:
            want = max(1, min(arr.size, int(round(max_coords * arr.size / total))))
            want = max(want, min(arr.size, max(1, max_coords // (2 * len(params)))))
            order = rng.permutation(arr.size)
        done = 0
        for c in order:
            if done == want:
                break
            fp, pp = evaluate(name, arr, c, eps)
            fm, pm = evaluate(name, arr, c, -eps)
            if skip_kinks and (pp != base_pattern or pm != base_pattern):
                skipped += 1
                continue
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[c])
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
            done += 1
        checked += done
    result = GradCheckReport(worst, checked, skipped)
    return result if report else worst
