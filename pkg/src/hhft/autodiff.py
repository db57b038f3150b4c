"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays, float64 for gradient checks and tests, float32
allowed for training speed. Differentiable ops record a backward closure on
the thread's active Tape; because every node is appended after its parents,
the append order is a topological order and the backward pass is a single
reverse sweep that visits each node exactly once.

Ops run fine with no active tape (inference mode): they just return plain
untracked tensors.

Broadcasting is deliberately limited to bias addition over the last axis;
everything else requires exact shape agreement, which keeps the backward
rules small enough to audit.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class FlopCounter:
    """Counts scalar multiplies (MACs) of ops executed inside the context.

    Multiplications and divisions each count 1 per output element; matmul
    counts m*k*n per stacked matrix product. Additions, exponentials, and
    comparisons are free. Only forward ops count; backward closures run raw
    numpy and are never instrumented.
    """

    def __init__(self) -> None:
        self.macs = 0

    def __enter__(self) -> "FlopCounter":
        if getattr(_state, "flops", None) is not None:
            raise ContractError("flop counters do not nest")
        _state.flops = self
        return self

    def __exit__(self, *exc) -> bool:
        _state.flops = None
        return False


def _count_macs(n: int) -> None:
    counter = getattr(_state, "flops", None)
    if counter is not None:
        counter.macs += int(n)


class Tensor:
    """A dense row-major real array, optionally tracked for differentiation.

    `node_id`/`tape` identify the node this tensor occupies on the tape it
    was last recorded on. Tensors are treated as immutable after creation;
    the single sanctioned exception is the optimizer's in-place parameter
    update between training steps.
    """

    __slots__ = ("data", "grad_enabled", "node_id", "tape")

    def __init__(self, data, grad_enabled: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad_enabled = bool(grad_enabled)
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __sub__(self, other) -> "Tensor":
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Append-only record of differentiable ops, one per node.

    Usable as a context manager; ops executed inside record themselves here.
    Parents of node i always have index < i, so the node list is a DAG in
    topological order by construction. One tape per thread at a time;
    independent tapes may run on separate threads.
    """

    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._backward: list[Callable[[np.ndarray], tuple] | None] = []
        self._meta: list[tuple[tuple[int, ...], np.dtype]] = []

    def __len__(self) -> int:
        return len(self._parents)

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ContractError("a Tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _state.tape = None
        return False

    def watch(self, t: Tensor) -> int:
        """Register a tensor as a leaf node; idempotent per tape."""
        if not t.grad_enabled:
            raise ContractError("watch() target must have grad_enabled=True")
        if t.tape is self and t.node_id is not None:
            return t.node_id
        t.tape = self
        t.node_id = self._append((), None, t.data.shape, t.data.dtype)
        return t.node_id

    def _append(self, parents, backward_fn, shape, dtype) -> int:
        self._parents.append(parents)
        self._backward.append(backward_fn)
        self._meta.append((shape, dtype))
        return len(self._parents) - 1

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Reverse sweep from a scalar loss.

        Returns gradients keyed by node id for every node the loss reaches,
        plus explicit zeros for unreached leaf nodes so parameters always
        have an entry.
        """
        if loss.tape is not self or loss.node_id is None or not loss.grad_enabled:
            raise ContractError("loss was not recorded on this tape")
        if loss.data.shape != ():
            raise ContractError(
                f"backward expects a scalar loss, got shape {loss.data.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self._parents)
        grads[loss.node_id] = np.ones((), dtype=loss.data.dtype)
        for nid in range(loss.node_id, -1, -1):
            gout = grads[nid]
            fn = self._backward[nid]
            if gout is None or fn is None:
                continue
            for pid, pg in zip(self._parents[nid], fn(gout)):
                if pid < 0 or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    # out-of-place: pg may alias another node's buffer
                    grads[pid] = grads[pid] + pg
        out: dict[int, Tensor] = {}
        for nid, g in enumerate(grads):
            if g is not None:
                out[nid] = Tensor(np.ascontiguousarray(g))
            elif self._backward[nid] is None:
                shape, dtype = self._meta[nid]
                out[nid] = Tensor(np.zeros(shape, dtype=dtype))
        return out

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
        """Gradients of `loss` w.r.t. each tensor in `params`, zeros if unused."""
        grads = self.backward(loss)
        out = []
        for p in params:
            if not p.grad_enabled:
                raise ContractError("gradient target has grad_enabled=False")
            if p.tape is self and p.node_id is not None and p.node_id in grads:
                out.append(grads[p.node_id])
            else:
                out.append(Tensor(np.zeros_like(p.data)))
        return out


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(t.grad_enabled for t in inputs):
        return Tensor(out_data)
    out = Tensor(out_data, grad_enabled=True)
    parent_ids = tuple(tape.watch(t) if t.grad_enabled else -1 for t in inputs)
    out.tape = tape
    out.node_id = tape._append(parent_ids, backward_fn, out_data.shape, out_data.dtype)
    return out


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: (..., m, k) @ (k, n) applies one matrix to every
    stacked row block; (..., m, k) @ (..., k, n) with identical leading
    dims multiplies stack-wise. No other broadcasting.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions disagree: {ad.shape} @ {bd.shape}")
    out = ad @ bd
    _count_macs(out.size * ad.shape[-1])

    if bd.ndim == 2:

        def backward(g: np.ndarray):
            k = ad.shape[-1]
            da = g @ bd.T
            db = ad.reshape(-1, k).T @ g.reshape(-1, bd.shape[-1])
            return da, db

    else:

        def backward(g: np.ndarray):
            da = g @ bd.swapaxes(-1, -2)
            db = ad.swapaxes(-1, -2) @ g
            return da, db

    return _record(out, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    """a + b: same shape, a 1-d bias over the last axis, or a python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _record(a.data + c, (a,), lambda g: (g,))
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        return _record(ad + bd, (a, b), lambda g: (g, g))
    if bd.ndim == 1 and ad.ndim >= 1 and ad.shape[-1] == bd.shape[0]:
        n = bd.shape[0]

        def backward(g: np.ndarray):
            return g, g.reshape(-1, n).sum(axis=0)

        return _record(ad + bd, (a, b), backward)
    raise ShapeError(f"add shapes disagree: {ad.shape} + {bd.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes disagree: {a.shape} - {b.shape}")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with an equal-shape tensor or a scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        _count_macs(a.size)
        return _record(a.data * c, (a,), lambda g: (g * c,))
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"mul shapes disagree: {ad.shape} * {bd.shape}")
    _count_macs(ad.size)
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    # subgradient at 0 is 0
    return _record(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_stable(x.data)
    _count_macs(x.size)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-free for any finite input."""
    xd = x.data
    out = np.logaddexp(0.0, xd).astype(xd.dtype)
    return _record(out, (x,), lambda g: (g * _sigmoid_stable(xd),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    _count_macs(x.size)

    def backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale + shift."""
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must be ({d},), got {gain.shape}/{bias.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    _count_macs(3 * xd.size + xd.size // d)
    gd = gain.data

    def backward(g: np.ndarray):
        gg = g * gd
        dx = inv * (
            gg
            - gg.mean(axis=-1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    datas = [p.data for p in parts]
    ref = list(datas[0].shape)
    for dshape in (p.shape for p in parts[1:]):
        other = list(dshape)
        if len(other) != len(ref) or any(
            i != axis % len(ref) and other[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"concat shapes disagree along non-axis dims: "
                             f"{[p.shape for p in parts]}")
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(parts), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Basic slice [start:stop) along one axis."""
    xd = x.data
    n = xd.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis {axis} "
                         f"of shape {xd.shape}")
    idx = [slice(None)] * xd.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = xd[idx]

    def backward(g: np.ndarray):
        dx = np.zeros_like(xd)
        dx[idx] = g
        return (dx,)

    return _record(out, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    in_shape = x.data.shape
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(in_shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def sum_axis(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, xd.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, xd.shape).copy(),)

    return _record(out, (x,), backward)


def mean_axis(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    xd = x.data
    n = xd.size if axis is None else xd.shape[axis]
    out = xd.mean(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g / n, xd.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / n, xd.shape).copy(),)

    return _record(out, (x,), backward)


def embedding_lookup(table: Tensor, ids, name: str = "embedding") -> Tensor:
    """Gather rows of `table` by integer id; backward densely accumulates rows."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"{name}: ids must be 1-d, got shape {idx.shape}")
    vocab = table.shape[0]
    if idx.size:
        bad = idx[(idx < 0) | (idx >= vocab)]
        if bad.size:
            raise IndexError(
                f"{name}: id {int(bad[0])} out of range [0, {vocab})"
            )
    out = table.data[idx]
    td = table.data

    def backward(g: np.ndarray):
        dt = np.zeros_like(td)
        np.add.at(dt, idx, g)
        return (dt,)

    return _record(out, (table,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Worst-coordinate summary of a finite-difference gradient comparison."""

    max_rel_err: float
    passed: bool
    worst_param: str = ""
    worst_index: tuple = ()
    analytic: float = 0.0
    numeric: float = 0.0

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} "
            f"at {self.worst_param}{list(self.worst_index)} "
            f"(analytic={self.analytic:.6e}, numeric={self.numeric:.6e})"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of a scalar function against central differences.

    `f` must be a deterministic closure over `params` returning a scalar
    Tensor. Parameters must be float64; relative error per coordinate uses
    max(|analytic|, |numeric|, 1e-8) as the denominator.
    """
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    for p in params:
        if p.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
        if not p.grad_enabled:
            raise ContractError("grad_check parameters must be grad-enabled")

    with Tape() as tape:
        loss = f()
    analytic = tape.gradient(loss, params)

    report = GradCheckReport(max_rel_err=0.0, passed=True)
    for p, a, name in zip(params, analytic, names):
        flat = p.data.reshape(-1)
        aflat = a.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().data)
            flat[i] = orig - step
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(numeric), abs(aflat[i]), 1e-8)
            rel = abs(numeric - aflat[i]) / denom
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_param = name
                report.worst_index = tuple(
                    int(v) for v in np.unravel_index(i, p.shape)
                ) if p.ndim else ()
                report.analytic = float(aflat[i])
                report.numeric = numeric
    report.passed = report.max_rel_err <= tol
    return report
