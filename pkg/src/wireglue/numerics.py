"""Small reverse-mode autodiff core on float64 numpy arrays.

Values are plain ``numpy.ndarray`` objects. A :class:`Var` wraps a value and,
when it belongs to a :class:`GradTape`, records how it was produced so that
:meth:`GradTape.backward` can push gradients back to the registered
parameters. Ops accept either ``Var`` or raw arrays; when no input lives on a
tape the op degenerates to a plain numpy computation.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Var", "GradTape", "MlpParams", "ShapeError",
    "value_of", "matmul", "linear", "add", "sub", "mul", "scale", "relu",
    "concat", "take_rows", "gather2d", "pick", "segment_sum", "transpose", "reshape",
    "exp", "log", "sqrt", "maximum", "total", "softmax", "log_softmax",
    "dustbin_augment", "mlp_forward", "svd3", "grad_check",
    "save_checkpoint", "load_checkpoint", "Adam",
]


class ShapeError(ValueError):
    pass


class Var:
    __slots__ = ("value", "grad", "parents", "backward", "tape")

    def __init__(self, value, tape=None, parents=(), backward=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward = backward
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, on_tape={self.tape is not None})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class GradTape:
    """Records ops in creation order; replaying it backwards is a valid
    topological traversal, so each op is visited exactly once."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def param(self, name: str, value) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), tape=self)
        self.params[name] = v
        return v

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.param(k, v) for k, v in params.items()}

    def backward(self, out: Var) -> dict[str, np.ndarray]:
        if out.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if out.value.size != 1:
            raise ShapeError("backward needs a scalar output")
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or parent.tape is None:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
        return {
            k: (v.grad if v.grad is not None else np.zeros_like(v.value))
            for k, v in self.params.items()
        }


def _v(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _result(value, parents, backward) -> Var:
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    if tape is None:
        return Var(value)
    out = Var(value, tape=tape, parents=parents, backward=backward)
    tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Var:
    a, b = _v(a), _v(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _result(av @ bv, (a, b), back)


def linear(x, w, b=None) -> Var:
    """``x @ w + b`` for 2-D ``x``; fused to keep the tape short."""
    x, w = _v(x), _v(w)
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0]:
        raise ShapeError(
            f"linear expects last dim {wv.shape[0]}, got input shape {xv.shape}")
    out = xv @ wv
    if b is None:
        def back(g):
            return g @ wv.T, xv.T @ g
        return _result(out, (x, w), back)
    b = _v(b)
    out = out + b.value

    def back(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _result(out, (x, w, b), back)


def add(a, b) -> Var:
    a, b = _v(a), _v(b)
    sa, sb = a.value.shape, b.value.shape
    return _result(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = _v(a), _v(b)
    sa, sb = a.value.shape, b.value.shape
    return _result(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = _v(a), _v(b)
    av, bv = a.value, b.value
    return _result(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape),
                              _unbroadcast(g * av, bv.shape)))


def scale(a, c: float) -> Var:
    a = _v(a)
    return _result(a.value * c, (a,), lambda g: (g * c,))


def relu(a) -> Var:
    a = _v(a)
    mask = a.value > 0
    return _result(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def concat(xs: Sequence, axis: int = -1) -> Var:
    xs = [_v(x) for x in xs]
    vals = [x.value for x in xs]
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tuple(xs), back)


def take_rows(a, idx) -> Var:
    a = _v(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.value.shape

    def back(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result(a.value[idx], (a,), back)


def gather2d(a, rows, cols) -> Var:
    """``a[rows][:, cols]`` as an outer-product gather."""
    a = _v(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    sel = np.ix_(rows, cols)
    shape = a.value.shape

    def back(g):
        ga = np.zeros(shape)
        np.add.at(ga, sel, g)
        return (ga,)

    return _result(a.value[sel], (a,), back)


def pick(a, rows, cols) -> Var:
    """Elementwise gather ``a[rows[k], cols[k]]``."""
    a = _v(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.value.shape

    def back(g):
        ga = np.zeros(shape)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _result(a.value[rows, cols], (a,), back)


def segment_sum(a, idx, n: int) -> Var:
    """Sum rows of ``a`` into ``n`` buckets given by ``idx``."""
    a = _v(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n,) + a.value.shape[1:])
    np.add.at(out, idx, a.value)
    return _result(out, (a,), lambda g: (g[idx],))


def transpose(a, axes=None) -> Var:
    a = _v(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.value, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Var:
    a = _v(a)
    old = a.value.shape
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def exp(a) -> Var:
    a = _v(a)
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = _v(a)
    av = a.value
    return _result(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Var:
    a = _v(a)
    out = np.sqrt(a.value)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def maximum(a, b) -> Var:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _v(a), _v(b)
    take_a = a.value >= b.value
    out = np.where(take_a, a.value, b.value)
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.value.shape),
                              _unbroadcast(np.where(take_a, 0.0, g), b.value.shape)))


def total(a) -> Var:
    a = _v(a)
    shape = a.value.shape
    return _result(np.asarray(a.value.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def softmax(x, axis: int = -1):
    """Max-stabilised softmax. Returns an array for array input, a Var otherwise."""
    if not isinstance(x, Var):
        xv = np.asarray(x, dtype=np.float64)
        if xv.shape[axis] == 0:
            raise ShapeError("softmax over an empty axis")
        e = np.exp(xv - xv.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)
    return exp(log_softmax(x, axis))


def log_softmax(x, axis: int = -1):
    is_var = isinstance(x, Var)
    x = _v(x)
    xv = x.value
    if xv.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = xv - xv.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    if not is_var:
        return out
    p = np.exp(out)
    return _result(out, (x,),
                   lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def dustbin_augment(body, z) -> Var:
    """Append a row and a column filled with the scalar ``z``."""
    body, z = _v(body), _v(z)
    m, n = body.value.shape
    zv = float(np.asarray(z.value).reshape(()))
    out = np.full((m + 1, n + 1), zv)
    out[:m, :n] = body.value
    zshape = z.value.shape

    def back(g):
        gz = g[m, :].sum() + g[:m, n].sum()
        return g[:m, :n], np.full(zshape, gz)

    return _result(out, (body, z), back)


# ---------------------------------------------------------------- MLPs

@dataclass
class MlpParams:
    layers: list = field(default_factory=list)  # [(W, b), ...], W is (in, out)
    activation: str = "relu"

    def __post_init__(self):
        for k in range(1, len(self.layers)):
            if value_of(self.layers[k - 1][0]).shape[1] != value_of(self.layers[k][0]).shape[0]:
                raise ShapeError(f"layer {k - 1} -> {k} dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return value_of(self.layers[0][0]).shape[0]

    @property
    def out_dim(self) -> int:
        return value_of(self.layers[-1][0]).shape[1]


def mlp_forward(params: MlpParams, x):
    """Hidden layers use ``params.activation``; the last layer is linear.

    Returns an array when neither the input nor the weights are on a tape.
    """
    if value_of(x).shape[-1] != params.in_dim:
        raise ShapeError(
            f"MLP expects input width {params.in_dim}, got {value_of(x).shape[-1]}")
    h = x
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        h = linear(h, w, b)
        if k < last and params.activation == "relu":
            h = relu(h)
        elif k < last and params.activation not in ("linear", "identity"):
            raise ValueError(f"unknown activation {params.activation!r}")
    if isinstance(x, Var) or any(isinstance(t, Var) and t.tape is not None
                                 for layer in params.layers for t in layer):
        return h
    return h.value


# ---------------------------------------------------------------- 3x3 SVD

def svd3(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a 3x3 matrix by one-sided (Hestenes) Jacobi rotations.

    Returns ``U, S, V`` with ``m == U @ diag(S) @ V.T`` and ``S`` descending.
    Columns are orthogonalised to working precision relative to their own
    norms, so tiny singular values still get orthonormal vectors.
    """
    a = np.array(m, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(a)):
        raise ValueError("svd3 needs finite entries")
    v = np.eye(3)
    for _ in range(64):
        rotated = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            ap, aq = a[:, p], a[:, q]
            alpha = float(ap @ ap)
            beta = float(aq @ aq)
            gamma = float(ap @ aq)
            if gamma == 0.0 or abs(gamma) <= 1e-15 * math.sqrt(alpha * beta):
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * gamma)
            t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = c * t
            new_p = c * ap - s * aq
            new_q = s * ap + c * aq
            a[:, p], a[:, q] = new_p, new_q
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    sv = np.sqrt((a * a).sum(axis=0))
    order = np.argsort(-sv, kind="stable")
    sv, a, v = sv[order], a[:, order], v[:, order]
    u = np.zeros((3, 3))
    for i in range(3):
        # columns of negligible norm carry no direction: re-orthogonalise and,
        # if nothing is left, complete the basis from the standard axes
        cand = a[:, i] / sv[i] if sv[i] > 0.0 else np.zeros(3)
        cand = cand - u[:, :i] @ (u[:, :i].T @ cand)
        nrm = np.linalg.norm(cand)
        if nrm > 0.5:
            u[:, i] = cand / nrm
            continue
        for e in np.eye(3):
            cand = e - u[:, :i] @ (u[:, :i].T @ e)
            nrm = np.linalg.norm(cand)
            if nrm > 0.5:
                u[:, i] = cand / nrm
                break
    return u, sv, v


# ---------------------------------------------------------------- gradient check

def grad_check(f: Callable, params: Mapping[str, np.ndarray], eps: float = 1e-5,
               per_param: bool = False, floor: float = 1e-8):
    """Compare tape gradients of ``f`` against central differences.

    ``f`` receives a dict of parameters (``Var`` on a tape, or plain arrays
    during the finite-difference sweeps) and returns a scalar. The error for
    one parameter tensor is ``|a - fd| / max(|a|, |fd|, 1e-8)`` with ``|.|``
    the Euclidean norm over the tensor; the maximum over tensors is returned,
    or the whole dict when ``per_param`` is set. ``floor`` replaces the 1e-8
    and should sit above the finite-difference noise when some gradients are
    exactly zero (a key bias under softmax attention, for instance).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = GradTape()
    out = f(tape.watch(params))
    if not np.all(np.isfinite(value_of(out))):
        raise ValueError("function value is not finite")
    analytic = tape.backward(out)

    def evaluate(p):
        val = float(value_of(f(p)))
        if not math.isfinite(val):
            raise ValueError("function value is not finite under perturbation")
        return val

    errors = {}
    for name, base in params.items():
        fd = np.zeros_like(base)
        flat = fd.reshape(-1)
        for k in range(base.size):
            trial = dict(params)
            plus = base.copy()
            plus.reshape(-1)[k] += eps
            trial[name] = plus
            fp = evaluate(trial)
            minus = base.copy()
            minus.reshape(-1)[k] -= eps
            trial[name] = minus
            fm = evaluate(trial)
            flat[k] = (fp - fm) / (2.0 * eps)
        a = analytic[name]
        num = float(np.linalg.norm(a - fd))
        den = max(float(np.linalg.norm(a)), float(np.linalg.norm(fd)), floor)
        errors[name] = num / den
    if per_param:
        return errors
    return max(errors.values(), default=0.0)


# ---------------------------------------------------------------- checkpoints

def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError("checkpoint values must be finite")
    return format(x, ".17g")


def dumps_checkpoint(params: Mapping[str, np.ndarray]) -> str:
    parts = []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        data = ", ".join(_fmt(float(x)) for x in arr.reshape(-1))
        parts.append(f'  {json.dumps(name)}: {{"shape": {json.dumps(list(arr.shape))}, '
                     f'"data": [{data}]}}')
    return "{\n" + ",\n".join(parts) + "\n}\n"


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    atomic_write_text(path, dumps_checkpoint(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("checkpoint must be a JSON object")
    out = {}
    for name, rec in raw.items():
        try:
            shape = tuple(int(s) for s in rec["shape"])
            data = np.array(rec["data"], dtype=np.float64)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"checkpoint entry {name!r} is malformed") from exc
        if data.size != int(np.prod(shape)):
            raise ValueError(f"checkpoint entry {name!r}: {data.size} values for shape {shape}")
        out[name] = data.reshape(shape)
    return out


# ---------------------------------------------------------------- optimiser

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            self.params[k] = self.params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

