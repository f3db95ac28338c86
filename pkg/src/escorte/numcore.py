"""Dense float64 numerics with a tape-based reverse-mode autodiff.

Every op accepts plain ``numpy`` arrays or :class:`Var` handles. With only
arrays as inputs an op returns an array; if any input is a ``Var`` the result
is a ``Var`` recorded on that input's tape.

Random streams use numpy's Philox4x64 counter-based bit generator, keyed by
``numpy.random.SeedSequence`` so child streams can be split by index.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# RNG


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Seeded generator; ``keys`` derive independent child streams."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# Tape


class Tape:
    """Records primitive ops in execution order.

    ``record=False`` gives an inference tape: values flow through ``Var``
    handles but nothing is stored, so ``backward`` is unavailable.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[tuple[int, tuple, Callable | None]] = []
        self._next = 0

    def _new_id(self) -> int:
        i = self._next
        self._next += 1
        return i

    def leaf(self, value) -> "Var":
        return Var(np.asarray(value, dtype=DTYPE), self, self._new_id())

    def _push(self, value, parents: tuple, backfn) -> "Var":
        out = Var(value, self, self._new_id())
        if self.record:
            self.nodes.append((out.id, parents, backfn))
        return out

    def __len__(self):
        return len(self.nodes)


class Var:
    __slots__ = ("value", "tape", "id")
    __array_priority__ = 100

    def __init__(self, value: np.ndarray, tape: Tape, id_: int):
        self.value = value
        self.tape = tape
        self.id = id_

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=DTYPE)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _emit(inputs: tuple, value: np.ndarray, backfn):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    parents = tuple(x.id if isinstance(x, Var) and x.tape is tape else None for x in inputs)
    return tape._push(value, parents, backfn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Gradients:
    """Gradient store produced by :func:`backward`; index with a ``Var``."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._g = grads

    def __getitem__(self, v: Var) -> np.ndarray:
        g = self._g.get(v.id)
        return np.zeros_like(v.value) if g is None else g

    def __contains__(self, v: Var) -> bool:
        return v.id in self._g


def backward(tape: Tape, loss: Var) -> Gradients:
    if not tape.record:
        raise ContractError("backward needs a recording tape")
    if loss.tape is not tape:
        raise ContractError("loss node belongs to another tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for out_id, parents, backfn in reversed(tape.nodes):
        g = grads.get(out_id)
        if g is None:
            continue
        for pid, pg in zip(parents, backfn(g)):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return Gradients(grads)


# --------------------------------------------------------------------------
# Primitive ops


def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit((a, b), av + bv, lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit((a, b), av - bv, lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit(
        (a, b), av * bv, lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def matmul(a, b):
    """Matrix product, batched over leading axes as in ``numpy.matmul``."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}")

    if bv.ndim == 2 and av.ndim > 2:
        # fold batch axes into rows: one BLAS call each way
        a2 = av.reshape(-1, av.shape[-1])

        def back2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bv.T).reshape(av.shape), a2.T @ g2

        return _emit((a, b), (a2 @ bv).reshape(*av.shape[:-1], bv.shape[-1]), back2)

    def back(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit((a, b), np.matmul(av, bv), back)


def relu(x):
    xv = value_of(x)
    on = xv > 0
    return _emit((x,), np.where(on, xv, 0.0), lambda g: (g * on,))


def _softmax_value(xv: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    if valid is not None:
        valid = np.broadcast_to(valid, xv.shape)
        # rows with no valid entry fall back to plain softmax
        valid = valid | ~valid.any(axis=-1, keepdims=True)
        xv = np.where(valid, xv, -np.inf)
    m = xv.max(axis=-1, keepdims=True)
    e = np.exp(xv - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x, valid: np.ndarray | None = None):
    """Softmax over the last axis.

    ``valid`` (bool, broadcastable) excludes entries, i.e. they get a -inf
    score. A row with every entry excluded is treated as fully valid.
    """
    y = _softmax_value(value_of(x), valid)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit((x,), y, back)


def row_softmax(v):
    return softmax(v)


def log_softmax(x):
    xv = value_of(x)
    z = xv - xv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _emit((x,), out, lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def sum_(x, axis=None, keepdims: bool = False):
    xv = value_of(x)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _emit((x,), np.asarray(xv.sum(axis=axis, keepdims=keepdims)), back)


def mean(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    xv = value_of(x)
    return _emit((x,), xv.reshape(shape), lambda g: (g.reshape(xv.shape),))


def transpose(x, axes):
    xv = value_of(x)
    inv = np.argsort(axes)
    return _emit((x,), np.transpose(xv, axes), lambda g: (np.transpose(g, inv),))


def take(x, index: int, axis: int):
    """Slice ``index`` along ``axis``, keeping the axis (length 1)."""
    xv = value_of(x)
    sl = [slice(None)] * xv.ndim
    sl[axis] = slice(index, index + 1 if index != -1 else None)
    sl = tuple(sl)

    def back(g):
        out = np.zeros_like(xv)
        out[sl] = g
        return (out,)

    return _emit((x,), xv[sl], back)


def l2norm(x, axis: int = -1):
    """Euclidean norm along ``axis``; subgradient 0 at the origin."""
    xv = value_of(x)
    n = np.sqrt((xv * xv).sum(axis=axis))

    def back(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.expand_dims(g, axis) * np.where(nk > 0, xv / safe, 0.0),)

    return _emit((x,), n, back)


def layer_norm(x, eps: float = 1e-5):
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    xv = value_of(x)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit((x,), y, back)


def log(x, floor: float = 1e-300):
    xv = np.maximum(value_of(x), floor)
    return _emit((x,), np.log(xv), lambda g: (g / xv,))


# --------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected adaptive-moment update. Inputs are not mutated."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")
    if not state.m:
        m0 = [np.zeros_like(p) for p in params]
        v0 = [np.zeros_like(p) for p in params]
    else:
        m0, v0 = state.m, state.v
        for p, m in zip(params, m0):
            if p.shape != m.shape:
                raise ShapeError(f"param shape {p.shape} != accumulator shape {m.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m0, v0):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)


# --------------------------------------------------------------------------
# Gradient checking


def grad_check(
    f: Callable[[list[Var]], Var],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a list of leaf ``Var`` (one per param) to a scalar ``Var``.
    Error per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = [np.array(p, dtype=DTYPE) for p in params]

    def evaluate(ps) -> float:
        t = Tape(record=False)
        return float(value_of(f([t.leaf(p) for p in ps])))

    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    grads = backward(tape, f(leaves))
    worst = 0.0
    for k, p in enumerate(params):
        analytic = grads[leaves[k]]
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            fp = evaluate(params)
            p[idx] = orig - eps
            fm = evaluate(params)
            p[idx] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic[idx]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


# --------------------------------------------------------------------------
# Checkpoints
#
# Layout (all integers little-endian):
#   b"ESCORTE-CKPT"                  12 bytes
#   u32 format version
#   u32 header length, header JSON   {"kind": str, "dims": {...}}
#   u32 block count
#   per block: u16 name length, name (utf-8), u8 ndim, u32 x ndim shape,
#              float64 LE row-major data

MAGIC = b"ESCORTE-CKPT"
CKPT_VERSION = 1


def dumps_checkpoint(kind: str, dims: Mapping, params: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    header = json.dumps({"kind": kind, "dims": dict(dims)}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads_checkpoint(data: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    mv = memoryview(data)
    if bytes(mv[:12]) != MAGIC:
        raise CheckpointError("not an ESCORTE checkpoint (bad magic)")
    pos = 12

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, mv, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (version,) = take("<I")
        if version != CKPT_VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
        (hlen,) = take("<I")
        header = json.loads(bytes(mv[pos : pos + hlen]))
        pos += hlen
        (count,) = take("<I")
        params = {}
        for _ in range(count):
            (nlen,) = take("<H")
            name = bytes(mv[pos : pos + nlen]).decode()
            pos += nlen
            (ndim,) = take("<B")
            shape = take(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            if pos + 8 * n > len(mv):
                raise CheckpointError(f"truncated block {name!r}")
            arr = np.frombuffer(mv[pos : pos + 8 * n], dtype="<f8").reshape(shape).astype(DTYPE)
            pos += 8 * n
            params[name] = arr
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from None
    if pos != len(mv):
        raise CheckpointError("trailing bytes after last parameter block")
    return header["kind"], header["dims"], params


def fingerprint(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    """Uniform in ±1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def leaves(tape: Tape, params: Mapping[str, np.ndarray]) -> dict[str, Var]:
    return {k: tape.leaf(v) for k, v in params.items()}


def assert_finite(xs: Iterable[np.ndarray], what: str) -> None:
    for x in xs:
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite values in {what}")
