"""Minimal reverse-mode automatic differentiation on dense float64 tensors.

A Tape records primitive executions in order; backward() replays the records
in reverse, accumulating vector-Jacobian products. The primitive set is the
small fixed vocabulary needed by the transformer models and the residual
assembly: matmul, add, mul, sub, scale, reduce_sum, softmax_lastdim,
layer_norm_lastdim, gelu, tanh, softplus, dropout (explicit mask), concat,
slice, transpose — plus spmm/rspmm for constant sparse matrices (the fine
mass matrices enter the coarsening contractions on-tape).

Everything is 64-bit and deterministic; tensors on a tape are never mutated
in place. Any primitive producing a NaN/Inf raises immediately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit


class AutodiffError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "tape", "tid", "grad", "needs")

    def __init__(self, data, requires_grad=False, tape=None, tid=-1, needs=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape = tape
        self.tid = tid
        self.grad = None
        self.needs = self.requires_grad if needs is None else needs

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar (thin wrappers over the primitives below)
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class Record:
    op: str
    out_id: int
    in_ids: tuple
    vjp: callable  # grad_out -> list of grads aligned with in_ids (None allowed)


class Tape:
    """Ordered, single-assignment record list for one forward computation."""

    def __init__(self):
        self.records: list[Record] = []
        self._next = 0
        self._produced: set[int] = set()

    def _new_id(self):
        self._next += 1
        return self._next - 1

    def tensor(self, data, requires_grad=False):
        """Register a leaf tensor (parameter or constant input)."""
        return Tensor(data, requires_grad, self, self._new_id())

    def constant(self, data):
        return self.tensor(data, requires_grad=False)

    def _coerce(self, x):
        if isinstance(x, Tensor):
            if x.tape is not None and x.tape is not self:
                raise AutodiffError("tensor belongs to a different tape")
            if x.tape is None:
                x.tape, x.tid = self, self._new_id()
            return x
        return self.constant(np.asarray(x, dtype=np.float64))

    def record(self, op, inputs, out_data, vjp):
        if not np.isfinite(out_data).all():
            raise AutodiffError(f"primitive {op!r} produced non-finite values")
        needs = any(t.needs for t in inputs)
        out = Tensor(out_data, False, self, self._new_id(), needs=needs)
        self._produced.add(out.tid)
        if needs:
            self.records.append(Record(op, out.tid, tuple(t.tid for t in inputs), vjp))
        return out

    def backward(self, output: Tensor, seed=None):
        """Accumulate VJPs in reverse order; fills .grad on requires_grad leaves.

        Returns a dict tid -> gradient for every visited tensor. Repeated
        calls are independent (gradients are overwritten, not accumulated
        across calls).
        """
        if output.tape is not self or output.tid not in self._produced:
            raise AutodiffError("can only seed a tensor produced by this tape")
        if seed is None:
            if output.data.size != 1:
                raise AutodiffError("default seed requires a scalar output")
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.data.shape:
            raise AutodiffError(
                f"seed shape {seed.shape} does not match output {output.data.shape}"
            )
        grads: dict[int, np.ndarray] = {output.tid: seed}
        id_to_tensor: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.get(rec.out_id)
            if g is None:
                continue
            for tid, gin in zip(rec.in_ids, rec.vjp(g)):
                if gin is None:
                    continue
                acc = grads.get(tid)
                grads[tid] = gin if acc is None else acc + gin
        # write .grad on leaves the caller holds
        self._grads = grads
        return grads

    def grad_of(self, t: Tensor):
        g = getattr(self, "_grads", {}).get(t.tid)
        if g is None:
            return np.zeros_like(t.data)
        return g


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    raise AutodiffError("no tape found among operands")


def _unbroadcast(g, shape):
    # reduce g down to `shape` after numpy broadcasting
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_2d(op, a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(f"{op}: incompatible shapes {a.data.shape} @ {b.data.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = tape._coerce(a), tape._coerce(b)
    _check_2d("matmul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return [g @ bd.T if a.needs else None, ad.T @ g if b.needs else None]

    return tape.record("matmul", [a, b], ad @ bd, vjp)


def add(a, b):
    tape = _tape_of(a, b)
    a, b = tape._coerce(a), tape._coerce(b)
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return [_unbroadcast(g, sa), _unbroadcast(g, sb)]

    return tape.record("add", [a, b], a.data + b.data, vjp)


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = tape._coerce(a), tape._coerce(b)
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return [_unbroadcast(g, sa), _unbroadcast(-g, sb)]

    return tape.record("sub", [a, b], a.data - b.data, vjp)


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = tape._coerce(a), tape._coerce(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return [_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)]

    return tape.record("mul", [a, b], ad * bd, vjp)


def scale(a, c: float):
    tape = _tape_of(a)
    a = tape._coerce(a)
    c = float(c)

    def vjp(g):
        return [c * g]

    return tape.record("scale", [a], c * a.data, vjp)


def reduce_sum(a, axis=None, keepdims=False):
    tape = _tape_of(a)
    a = tape._coerce(a)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return [np.broadcast_to(g, shape).copy()]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(gg, shape).copy()]

    return tape.record("reduce_sum", [a], a.data.sum(axis=axis, keepdims=keepdims), vjp)


def softmax_lastdim(x):
    tape = _tape_of(x)
    x = tape._coerce(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return [s * (g - (g * s).sum(axis=-1, keepdims=True))]

    return tape.record("softmax_lastdim", [x], s, vjp)


def layer_norm_lastdim(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the final (per-token) dimension only, then affine."""
    tape = _tape_of(x, gamma, beta)
    x, gamma, beta = tape._coerce(x), tape._coerce(gamma), tape._coerce(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    gd = gamma.data

    def vjp(g):
        n = x.data.shape[-1]
        dy = g * gd
        dx = inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dgamma = _unbroadcast((g * y).sum(axis=axes), gamma.data.shape) if g.ndim > 1 else g * y
        dbeta = _unbroadcast(g.sum(axis=axes), beta.data.shape) if g.ndim > 1 else g
        return [dx, dgamma.reshape(gamma.data.shape), dbeta.reshape(beta.data.shape)]

    return tape.record("layer_norm_lastdim", [x, gamma, beta], y * gd + beta.data, vjp)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    tape = _tape_of(x)
    x = tape._coerce(x)
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd / _SQRT2))

    def vjp(g):
        return [g * (phi + xd * np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI)]

    return tape.record("gelu", [x], xd * phi, vjp)


def tanh(x):
    tape = _tape_of(x)
    x = tape._coerce(x)
    t = np.tanh(x.data)

    def vjp(g):
        return [g * (1.0 - t * t)]

    return tape.record("tanh", [x], t, vjp)


def softplus(x):
    tape = _tape_of(x)
    x = tape._coerce(x)
    xd = x.data
    y = np.logaddexp(0.0, xd)

    def vjp(g):
        return [g * expit(xd)]

    return tape.record("softplus", [x], y, vjp)


def dropout(x, mask):
    """Multiply by an explicit, pre-sampled mask (entries 0 or 1/(1-p))."""
    tape = _tape_of(x)
    x = tape._coerce(x)
    md = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if md.shape != x.data.shape:
        raise AutodiffError(f"dropout: mask shape {md.shape} != input {x.data.shape}")

    def vjp(g):
        return [g * md]

    return tape.record("dropout", [x], x.data * md, vjp)


def concat(parts, axis=0):
    tape = _tape_of(*parts)
    parts = [tape._coerce(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return list(np.split(g, splits, axis=axis))

    return tape.record("concat", parts, np.concatenate([p.data for p in parts], axis=axis), vjp)


def slice_(x, key):
    """Basic slicing with a tuple of `slice` objects (rank-preserving)."""
    tape = _tape_of(x)
    x = tape._coerce(x)
    if not isinstance(key, tuple):
        key = (key,)
    if not all(isinstance(k, slice) for k in key):
        raise AutodiffError("slice_ accepts slice objects only")
    shape = x.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return [full]

    return tape.record("slice", [x], x.data[key].copy(), vjp)


def transpose(x, axes=None):
    tape = _tape_of(x)
    x = tape._coerce(x)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def vjp(g):
        return [g.transpose(inv) if inv is not None else g.transpose()]

    return tape.record("transpose", [x], x.data.transpose(axes), vjp)


def spmm(a_sparse, x):
    """Constant sparse CSR @ tape tensor."""
    tape = _tape_of(x)
    x = tape._coerce(x)
    at = a_sparse.T.tocsr()

    def vjp(g):
        return [at @ g]

    return tape.record("spmm", [x], a_sparse @ x.data, vjp)


def rspmm(x, a_sparse):
    """Tape tensor @ constant sparse CSR."""
    tape = _tape_of(x)
    x = tape._coerce(x)
    at = a_sparse.T.tocsr()

    def vjp(g):
        return [g @ at]

    return tape.record("rspmm", [x], x.data @ a_sparse, vjp)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    rel_errs: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(f, x0, h=1e-5, samples=30, seed=0):
    """Central-difference check of a scalar tape function.

    Args:
        f: callable taking a Tensor and returning a scalar Tensor (it will be
            called with tensors on fresh tapes).
        x0: flat or shaped float64 array, the point to check at.
        h: FD step, must lie in [1e-8, 1e-3].
        samples: number of randomly chosen coordinates to probe.
        seed: RNG seed for coordinate sampling.

    Returns:
        GradCheckReport with per-coordinate relative errors
        |a - n| / max(|a|, |n|, 1e-12).
    """
    if not (1e-8 <= h <= 1e-3):
        raise ValueError(f"h={h} outside [1e-8, 1e-3]")
    x0 = np.asarray(x0, dtype=np.float64)

    tape = Tape()
    xt = tape.tensor(x0, requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise AutodiffError("grad_check needs a scalar function")
    grads = tape.backward(out)
    analytic = grads.get(xt.tid, np.zeros_like(x0)).ravel()

    def value(xv):
        t = Tape()
        y = f(t.tensor(xv)).data
        if not np.isfinite(y).all():
            raise AutodiffError("function returned NaN during grad_check")
        return float(y.reshape(-1)[0])

    rng = np.random.default_rng(seed)
    flat = x0.ravel()
    idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
    numeric = np.empty(len(idx))
    for k, i in enumerate(idx):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        numeric[k] = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2 * h)
    a = analytic[idx]
    rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
    worst = int(np.argmax(rel))
    return GradCheckReport(float(rel.max()), int(idx[worst]), rel, a, numeric)
