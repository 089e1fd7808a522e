"""NCHW tensors with reverse-mode autodiff over an explicit gradient tape.

Only the operations the super-resolution network and the finetuning losses
need are provided.  Tensors are immutable; every op returns a new tensor and,
when a :class:`GradTape` is active and one of the inputs is tracked by it,
records a node holding the backward rule.

Example::

    w = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    with GradTape() as tape:
        loss = mean(conv2d(x, w, None, padding=1))
    grads = backward(tape, loss)
    grads[w]
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from plqsr import kernels


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


_tape_ids = itertools.count(1)
_active: contextvars.ContextVar[Optional["GradTape"]] = contextvars.ContextVar(
    "plqsr_active_tape", default=None
)


class Tensor:
    """Immutable float array (float32 by default, float64 for gradient checks)."""

    __slots__ = ("data", "requires_grad", "name", "_tape_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        if arr.flags.writeable:
            if arr is data or arr.base is not None:
                arr = arr.copy()
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> Optional[int]:
        return self._tape_id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # takes ownership of a freshly computed array, no copy
        t = cls.__new__(cls)
        if arr.dtype != np.float64 and arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        t._tape_id = None
        return t

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable  # (grad_out, needs: tuple[bool]) -> tuple of grads or None
    op: str


class GradTape:
    """Records differentiable ops executed while it is the active tape."""

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[Node] = []
        self._watched: dict[int, Tensor] = {}
        self._token = None

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._watched[id(t)] = t

    def tracks(self, t: Tensor) -> bool:
        return t._tape_id == self.id or id(t) in self._watched or t.requires_grad

    @property
    def trainable(self) -> list[Tensor]:
        return list(self._watched.values())

    def __enter__(self) -> "GradTape":
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)
        self._token = None

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list:
        grads = backward(self, loss)
        return [grads.get(s) for s in sources]


def active_tape() -> Optional[GradTape]:
    return _active.get()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in output")


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    """Wrap ``out`` as a tensor and register ``bwd`` on the active tape.

    ``bwd(grad, needs)`` returns one gradient array (or None) per input; it is
    only asked for inputs whose ``needs`` flag is set.
    """
    _check_finite(out, op)
    result = Tensor._wrap(np.asarray(out))
    tape = _active.get()
    if tape is not None:
        for t in inputs:
            if t.requires_grad and id(t) not in tape._watched:
                tape.watch(t)
        if any(tape.tracks(t) for t in inputs):
            tape.nodes.append(Node(tuple(inputs), result, bwd, op))
            result._tape_id = tape.id
    return result


def backward(tape: GradTape, loss: Tensor) -> dict:
    """Reverse-mode accumulation from a scalar ``loss``.

    Returns ``{tensor: gradient Tensor}`` for every watched tensor the loss
    depends on; tensors that did not participate are absent.
    """
    if loss._tape_id != tape.id:
        raise TapeError("loss was not produced on this tape")
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        needs = tuple(tape.tracks(t) for t in node.inputs)
        if not any(needs):
            continue
        in_grads = node.backward(g, needs)
        for t, need, gi in zip(node.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    out = {}
    for key, t in tape._watched.items():
        if key in grads:
            out[t] = Tensor(grads[key])
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result_dtype(*arrs):
    return np.float64 if any(a.dtype == np.float64 for a in arrs) else np.float32


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    out = np.where(mask, xd, 0).astype(xd.dtype)

    def bwd(g, needs):
        return (np.where(mask, g, 0),)

    return record("relu", out, (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    dt = _result_dtype(a.data, b.data)
    out = (a.data.astype(dt, copy=False) + b.data.astype(dt, copy=False)).astype(dt)

    def bwd(g, needs):
        return g, g

    return record("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    dt = _result_dtype(a.data, b.data)
    out = (a.data.astype(dt, copy=False) - b.data.astype(dt, copy=False)).astype(dt)

    def bwd(g, needs):
        return g, -g

    return record("sub", out, (a, b), bwd)


def scalar_mul(x: Tensor, s: float) -> Tensor:
    s_cast = x.dtype.type(s)
    out = x.data * s_cast

    def bwd(g, needs):
        return (g * s_cast,)

    return record("scalar_mul", out, (x,), bwd)


def mul(x: Tensor, s: Tensor) -> Tensor:
    """``x`` times a scalar tensor ``s`` (differentiable in both)."""
    if s.size != 1:
        raise ShapeError(f"mul: second operand must be a scalar, got {s.shape}")
    sv = s.data.reshape(())
    dt = _result_dtype(x.data, s.data)
    out = (x.data * sv).astype(dt)

    def bwd(g, needs):
        gx = g * sv if needs[0] else None
        gs = np.sum(g * x.data, dtype=np.float64).reshape(s.shape) if needs[1] else None
        return gx, gs

    return record("mul", out, (x, s), bwd)


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    """Sum a sequence of scalar tensors in fixed order."""
    if not values:
        raise ShapeError("stack_scalars: empty sequence")
    total = values[0]
    for v in values[1:]:
        total = add(total, v)
    return total


# ---------------------------------------------------------------------------
# convolution


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation, NCHW input and (Cout, Cin, Kh, Kw) weight."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cin}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    dt = _result_dtype(x.data, weight.data)
    xp = x.data.astype(dt, copy=False)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if stride != 1:
        # strided conv = stride-1 conv subsampled; only used off the hot path
        ho1, wo1 = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    else:
        ho1, wo1 = ho, wo
    cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, ho1, wo1)
    wmat = weight.data.astype(dt, copy=False).reshape(cout, -1)
    full = (wmat @ cols).reshape(cout, n, ho1, wo1)
    out = full[:, :, ::stride, ::stride] if stride != 1 else full
    if bias is not None:
        out = out + bias.data.astype(dt, copy=False)[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g, needs):
        gfull = np.zeros((cout, n, ho1, wo1), dtype=dt)
        gfull[:, :, ::stride, ::stride] = g.transpose(1, 0, 2, 3)
        g2 = gfull.reshape(cout, -1)
        gx = gw = gb = None
        if needs[0]:
            gxp = kernels.col2im(wmat.T @ g2, n, c, hp, wp, kh, kw, ho1, wo1)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if needs[1]:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and needs[2]:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, bwd)


# ---------------------------------------------------------------------------
# rearrangement


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r); channel c*r*r + i*r + j lands at (i, j)."""
    n, crr, h, w = x.shape
    if r < 1 or crr % (r * r):
        raise ShapeError(f"pixel_shuffle: {crr} channels not divisible by r^2={r * r}")
    c = crr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def bwd(g, needs):
        return (_unshuffle(g, r),)

    return record("pixel_shuffle", np.ascontiguousarray(out), (x,), bwd)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = a.shape
    h, w = hr // r, wr // r
    return np.ascontiguousarray(
        a.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)
    )


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    n, c, hr, wr = x.shape
    if r < 1 or hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {hr}x{wr} not divisible by {r}")

    def bwd(g, needs):
        n_, crr, h, w = g.shape
        cc = crr // (r * r)
        return (g.reshape(n_, cc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n_, cc, h * r, w * r),)

    return record("pixel_unshuffle", _unshuffle(x.data, r), (x,), bwd)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation, result cast to the input dtype)


def _nonempty(x: Tensor, op: str) -> None:
    if x.size == 0:
        raise ShapeError(f"{op}: empty tensor")


def mean(x: Tensor) -> Tensor:
    _nonempty(x, "mean")
    n = x.size
    out = np.asarray(np.sum(x.data, dtype=np.float64) / n, dtype=x.dtype)

    def bwd(g, needs):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return record("mean", out, (x,), bwd)


def std(x: Tensor) -> Tensor:
    """Population standard deviation over all elements."""
    _nonempty(x, "std")
    if x.size < 2:
        raise ShapeError("std: need at least 2 elements")
    xd = x.data.astype(np.float64)
    n = xd.size
    centered = xd - xd.sum() / n
    sd = float(np.sqrt(np.sum(centered * centered) / n))

    def bwd(g, needs):
        if sd == 0.0:
            return (np.zeros(x.shape),)
        return (g * centered / (n * sd),)

    return record("std", np.asarray(sd, dtype=x.dtype), (x,), bwd)


def l1_diff(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; subgradient 0 where a == b."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_diff: shape mismatch {a.shape} vs {b.shape}")
    _nonempty(a, "l1_diff")
    dt = _result_dtype(a.data, b.data)
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = d.size
    out = np.asarray(np.sum(np.abs(d)) / n, dtype=dt)

    def bwd(g, needs):
        s = np.sign(d) * (g / n)
        return s, -s

    return record("l1_diff", out, (a, b), bwd)


def l2_norm(x: Tensor) -> Tensor:
    _nonempty(x, "l2_norm")
    xd = x.data.astype(np.float64)
    nrm = float(np.sqrt(np.sum(xd * xd)))

    def bwd(g, needs):
        if nrm == 0.0:
            return (np.zeros(x.shape),)
        return (g * xd / nrm,)

    return record("l2_norm", np.asarray(nrm, dtype=x.dtype), (x,), bwd)


def l2_diff(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean norm of ``a - b``."""
    if a.shape != b.shape:
        raise ShapeError(f"l2_diff: shape mismatch {a.shape} vs {b.shape}")
    _nonempty(a, "l2_diff")
    dt = _result_dtype(a.data, b.data)
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    nrm = float(np.sqrt(np.sum(d * d)))

    def bwd(g, needs):
        if nrm == 0.0:
            z = np.zeros(a.shape)
            return z, z
        s = g * d / nrm
        return s, -s

    return record("l2_diff", np.asarray(nrm, dtype=dt), (a, b), bwd)


def normalized_l2_diff(a: Tensor, b: Tensor) -> tuple[Tensor, int]:
    """Batch mean of ``|| a_n/||a_n|| - b_n/||b_n|| ||`` over samples ``n``.

    Samples where either map has zero norm contribute 0 (and no gradient);
    their count is returned alongside the loss.
    """
    if a.shape != b.shape:
        raise ShapeError(f"normalized_l2_diff: shape mismatch {a.shape} vs {b.shape}")
    _nonempty(a, "normalized_l2_diff")
    dt = _result_dtype(a.data, b.data)
    nb = a.shape[0]
    ad = a.data.astype(np.float64).reshape(nb, -1)
    bd = b.data.astype(np.float64).reshape(nb, -1)
    na = np.sqrt(np.sum(ad * ad, axis=1))
    nbn = np.sqrt(np.sum(bd * bd, axis=1))
    ok = (na > 0) & (nbn > 0)
    skipped = int(nb - ok.sum())
    safe_a = np.where(ok, na, 1.0)[:, None]
    safe_b = np.where(ok, nbn, 1.0)[:, None]
    ua = ad / safe_a
    ub = bd / safe_b
    diff = np.where(ok[:, None], ua - ub, 0.0)
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    total = float(np.sum(dist) / nb)

    def bwd(g, needs):
        # d/du ||u - v|| = (u - v)/||u - v||; d/da (a/|a|) = (I - u u^T)/|a|
        safe_d = np.where(dist > 0, dist, 1.0)[:, None]
        e = np.where((dist > 0)[:, None], diff / safe_d, 0.0) * (g / nb)
        ga = (e - ua * np.sum(e * ua, axis=1, keepdims=True)) / safe_a
        gb = -(e - ub * np.sum(e * ub, axis=1, keepdims=True)) / safe_b
        ga = np.where(ok[:, None], ga, 0.0)
        gb = np.where(ok[:, None], gb, 0.0)
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return record("normalized_l2_diff", np.asarray(total, dtype=dt), (a, b), bwd), skipped


# ---------------------------------------------------------------------------
# text dump format used by test fixtures and --dump-activations


def dump_tensor(t, path) -> None:
    """Write ``# shape d0 d1 ... dtype <name>`` followed by decimal values."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    header = "# shape " + " ".join(str(d) for d in arr.shape) + f" dtype {arr.dtype.name}\n"
    with open(path, "w") as fh:
        fh.write(header)
        flat = arr.reshape(-1)
        for i in range(0, flat.size, 8):
            fh.write(" ".join(repr(float(v)) for v in flat[i : i + 8]) + "\n")


def load_tensor(path) -> Tensor:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) < 3 or header[:2] != ["#", "shape"] or "dtype" not in header:
            raise ValueError(f"{path}: not a tensor dump")
        k = header.index("dtype")
        shape = tuple(int(d) for d in header[2:k])
        dtype = np.dtype(header[k + 1])
        values = np.array(fh.read().split(), dtype=np.float64)
    if values.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {int(np.prod(shape))} values, found {values.size}")
    return Tensor(values.astype(dtype).reshape(shape))
