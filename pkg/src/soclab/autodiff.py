"""Tape-based reverse-mode automatic differentiation on numpy arrays.

A Tape records primitive operations (affine maps, elementwise nonlinearities,
reductions, inner products) in an append-only list as they execute. Reverse
traversal of the list propagates adjoints. Vars wrap numpy arrays; anything
that is not a Var participates as a constant and receives no gradient.

Matrix products over a batch dimension are computed through fixed 64-row
tiles (padding the last tile with zeros), which makes every row of the result
bitwise independent of the batch size; plain BLAS calls do not guarantee that,
and the network contracts require batch-of-one evaluation to agree exactly
with batched evaluation.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "Tape", "Var", "add", "sub", "mul", "neg", "matmul", "relu", "tanh",
    "sigmoid", "exp", "log", "sqrt", "square", "softplus", "vsum", "vmean",
    "reshape", "swapaxes", "concat", "getitem", "matrix_inv", "lift",
    "grad_check",
]

_TILE = 64


def tiled_matmul_values(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(m,k)@(k,n) with per-row results independent of m (fixed-tile GEMMs)."""
    m = x.shape[0]
    tiles = -(-m // _TILE)
    padded = tiles * _TILE
    if padded != m:
        xp = np.zeros((padded, x.shape[1]), dtype=x.dtype)
        xp[:m] = x
    else:
        xp = x
    out = np.matmul(xp.reshape(tiles, _TILE, -1), w)
    return out.reshape(padded, -1)[:m]


class Var:
    """A node on a tape: a numpy value whose gradient can be requested."""

    __slots__ = ("tape", "value")

    def __init__(self, tape: "Tape", value: np.ndarray):
        self.tape = tape
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar; constants on either side are fine
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise ContractError("division by a Var is not a registered primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=float))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Append-only record of primitive operations with saved forward values."""

    def __init__(self):
        # each record: (output Var, input Vars, vjp(grad_out) -> grads per input)
        self._records: list[tuple[Var, tuple[Var, ...], Callable]] = []

    def leaf(self, value) -> Var:
        """Register a differentiable leaf (a parameter or traced input)."""
        return Var(self, np.asarray(value, dtype=float))

    def record(self, value: np.ndarray, inputs: tuple, vjp: Callable) -> Var:
        out = Var(self, value)
        self._records.append((out, inputs, vjp))
        return out

    def gradient(self, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Reverse-accumulate d output / d wrt_i. Output must be scalar-valued."""
        if output.value.size != 1:
            raise ContractError("gradient target must be a scalar")
        adjoint: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
        for out, inputs, vjp in reversed(self._records):
            g = adjoint.get(id(out))
            if g is None:
                continue
            in_grads = vjp(g)
            for var, ig in zip(inputs, in_grads):
                if ig is None:
                    continue
                key = id(var)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + ig
                else:
                    adjoint[key] = ig
        return [adjoint.get(id(v), np.zeros_like(v.value)) for v in wrt]


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ContractError("at least one operand must be a Var")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)
    inputs = tuple(x for x in (a, b) if isinstance(x, Var))

    def vjp(g):
        grads = []
        if a_var:
            grads.append(_unbroadcast(g, av.shape))
        if b_var:
            grads.append(_unbroadcast(g, bv.shape))
        return tuple(grads)

    return tape.record(av + bv, inputs, vjp)


def sub(a, b):
    return add(a, mul(b, -1.0) if isinstance(b, Var) else -_value(b))


def neg(a):
    return mul(a, -1.0)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)
    inputs = tuple(x for x in (a, b) if isinstance(x, Var))

    def vjp(g):
        grads = []
        if a_var:
            grads.append(_unbroadcast(g * bv, av.shape))
        if b_var:
            grads.append(_unbroadcast(g * av, bv.shape))
        return tuple(grads)

    return tape.record(av * bv, inputs, vjp)


def matmul(a, b):
    """Matrix product: 2D@2D (tiled over rows), 3D@2D, or 3D@3D batched."""
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)
    inputs = tuple(x for x in (a, b) if isinstance(x, Var))

    if av.ndim == 2 and bv.ndim == 2:
        out = tiled_matmul_values(av, bv)

        def vjp(g):
            grads = []
            if a_var:
                grads.append(tiled_matmul_values(g, bv.T))
            if b_var:
                grads.append(av.T @ g)
            return tuple(grads)

    elif av.ndim == 3 and bv.ndim == 2:
        out = np.matmul(av, bv)

        def vjp(g):
            grads = []
            if a_var:
                grads.append(np.matmul(g, bv.T))
            if b_var:
                k = av.shape[-1]
                grads.append(av.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            return tuple(grads)

    elif av.ndim == 3 and bv.ndim == 3:
        if av.shape[0] != bv.shape[0]:
            raise ContractError("batched matmul requires equal leading dimensions")
        out = np.matmul(av, bv)

        def vjp(g):
            grads = []
            if a_var:
                grads.append(np.matmul(g, bv.swapaxes(-1, -2)))
            if b_var:
                grads.append(np.matmul(av.swapaxes(-1, -2), g))
            return tuple(grads)

    else:
        raise ContractError(f"unsupported matmul ranks {av.ndim} @ {bv.ndim}")

    return tape.record(out, inputs, vjp)


def _elementwise(x, out_val, local_grad):
    tape = _tape_of(x)
    return tape.record(out_val, (x,), lambda g: (g * local_grad,))


def relu(x):
    xv = _value(x)
    mask = (xv > 0).astype(xv.dtype)
    return _elementwise(x, xv * mask, mask)


def tanh(x):
    out = np.tanh(_value(x))
    return _elementwise(x, out, 1.0 - out * out)


def sigmoid(x):
    xv = _value(x)
    out = 1.0 / (1.0 + np.exp(-xv))
    return _elementwise(x, out, out * (1.0 - out))


def exp(x):
    out = np.exp(_value(x))
    return _elementwise(x, out, out)


def log(x):
    xv = _value(x)
    return _elementwise(x, np.log(xv), 1.0 / xv)


def sqrt(x):
    out = np.sqrt(_value(x))
    return _elementwise(x, out, 0.5 / out)


def square(x):
    xv = _value(x)
    return _elementwise(x, xv * xv, 2.0 * xv)


def softplus(x):
    xv = _value(x)
    out = np.logaddexp(0.0, xv)
    return _elementwise(x, out, 1.0 / (1.0 + np.exp(-xv)))


def vsum(x, axis=None, keepdims=False):
    xv = _value(x)
    tape = _tape_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return tape.record(np.asarray(out), (x,), vjp)


def vmean(x, axis=None, keepdims=False):
    xv = _value(x)
    if axis is None:
        n = xv.size
    elif isinstance(axis, tuple):
        n = int(np.prod([xv.shape[a] for a in axis]))
    else:
        n = xv.shape[axis]
    return mul(vsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    xv = _value(x)
    tape = _tape_of(x)
    return tape.record(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def swapaxes(x, a: int, b: int):
    xv = _value(x)
    tape = _tape_of(x)
    return tape.record(xv.swapaxes(a, b).copy(), (x,),
                       lambda g: (np.asarray(g).swapaxes(a, b),))


def getitem(x, idx):
    xv = _value(x)
    tape = _tape_of(x)

    def vjp(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        return (full,)

    return tape.record(xv[idx], (x,), vjp)


def concat(parts, axis=0):
    tape = _tape_of(*[p for p in parts if isinstance(p, Var)])
    values = [_value(p) for p in parts]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    var_slots = [i for i, p in enumerate(parts) if isinstance(p, Var)]
    inputs = tuple(parts[i] for i in var_slots)

    def vjp(g):
        grads = []
        for i in var_slots:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return tape.record(np.concatenate(values, axis=axis), inputs, vjp)


def matrix_inv(x):
    """Inverse of (..., d, d) matrices; adjoint is -inv^T g inv^T."""
    xv = _value(x)
    tape = _tape_of(x)
    out = np.linalg.inv(xv)
    out_t = out.swapaxes(-1, -2)

    def vjp(g):
        return (-np.matmul(out_t, np.matmul(g, out_t)),)

    return tape.record(out, (x,), vjp)


def lift(x, value: np.ndarray, vjp_fn: Callable[[np.ndarray], np.ndarray]):
    """Record an externally computed function of x with a caller-supplied VJP.

    Used for problem callbacks (drift, costs): the forward value and the
    analytic adjoint rule are supplied; no autodiff runs inside the callback.
    """
    tape = _tape_of(x)
    return tape.record(np.asarray(value, dtype=float), (x,), lambda g: (vjp_fn(g),))


def grad_check(fn, params: dict[str, np.ndarray], step: float = 1e-5) -> float:
    """Max discrepancy between tape gradients and central finite differences.

    fn(tape, vars) must rebuild the scalar computation from scratch on every
    call. The returned error is relative for gradients of order one and
    larger, absolute below (denominator floored at 1).
    """
    params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
    tape = Tape()
    pvars = {k: tape.leaf(v) for k, v in params.items()}
    out = fn(tape, pvars)
    grads = tape.gradient(out, [pvars[k] for k in params])

    def value_at(mod: dict[str, np.ndarray]) -> float:
        t2 = Tape()
        vs = {k: t2.leaf(v) for k, v in mod.items()}
        return float(fn(t2, vs).value)

    worst = 0.0
    for gi, (name, base) in zip(grads, params.items()):
        flat = base.reshape(-1)
        gflat = np.asarray(gi).reshape(-1)
        for j in range(flat.size):
            bumped = {k: (v.copy() if k == name else v) for k, v in params.items()}
            bflat = bumped[name].reshape(-1)
            orig = bflat[j]
            bflat[j] = orig + step
            up = value_at(bumped)
            bflat[j] = orig - step
            down = value_at(bumped)
            fd = (up - down) / (2.0 * step)
            denom = max(abs(fd), abs(gflat[j]), 1.0)
            worst = max(worst, abs(gflat[j] - fd) / denom)
    return worst
