"""Fake quantizers: symmetric weights, asymmetric activations, piecewise linear.

All three round half away from zero.  The piecewise quantizer splits the
activation range ``[l_a, u_a]`` at a breakpoint ``bp`` into a dense region
``[-bp, bp]`` (``2**(b-1) - 1`` steps) and two outlier regions
``[l_a, -bp)`` / ``(bp, u_a]`` (``2**(b-2) - 1`` steps each).  Dequantized
values are clamped to their own region's interval, which only moves the
extreme dense codes ``+-c`` onto ``+-bp``; this keeps the quantizer monotone
and idempotent.

Gradients follow the straight-through estimator for the input (pass-through
inside the clipping range, zero outside) and the fixed-code rule for the
quantizer parameters: the integer code is held constant and the dequantization
expression is differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Optional

import numpy as np

from plqsr import kernels
from plqsr.tensor import Tensor, record

# ordering margin kept between l_a, -bp, bp and u_a
EPS = 1e-4

SYM_WEIGHT = "sym_uniform_weight"
ASYM_ACT = "asym_uniform_act"
PIECEWISE = "piecewise_act"
KINDS = (SYM_WEIGHT, ASYM_ACT, PIECEWISE)


class QuantError(ValueError):
    pass


class Region(Enum):
    DENSE = 0
    NEG_OUTLIER = 1
    POS_OUTLIER = 2
    NA = 3


def f32(v: float) -> float:
    """Round a Python float to the nearest float32 value."""
    return float(np.float32(v))


@dataclass
class QuantParams:
    """Per-layer quantizer state.

    Bounds are kept float32-representable so that quantizing an already
    quantized float32 tensor reproduces it exactly.
    """

    kind: str
    b: int
    l_a: Optional[float] = None
    u_a: Optional[float] = None
    bp: Optional[float] = None
    u_w: Optional[float] = None
    learnable: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise QuantError(f"unknown quantizer kind {self.kind!r}")
        min_bits = 3 if self.kind == PIECEWISE else 2
        if int(self.b) != self.b or self.b < min_bits:
            raise QuantError(f"{self.kind} needs an integer bit width >= {min_bits}, got {self.b}")
        self.b = int(self.b)
        for name in ("l_a", "u_a", "bp", "u_w"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, f32(v))
        if not self.learnable:
            self.learnable = {name: True for name in self.fields}

    @property
    def fields(self) -> tuple:
        if self.kind == SYM_WEIGHT:
            return ("u_w",)
        if self.kind == ASYM_ACT:
            return ("l_a", "u_a")
        return ("l_a", "u_a", "bp")

    @property
    def initialized(self) -> bool:
        return all(getattr(self, name) is not None for name in self.fields)

    def validate(self) -> None:
        if not self.initialized:
            raise QuantError(f"{self.kind} parameters not initialized")
        if self.kind == SYM_WEIGHT:
            if not self.u_w > 0:
                raise QuantError(f"u_w must be > 0, got {self.u_w}")
        elif self.kind == ASYM_ACT:
            if not self.l_a < self.u_a:
                raise QuantError(f"need l_a < u_a, got {self.l_a} >= {self.u_a}")
        else:
            if not (self.l_a <= -self.bp < 0 < self.bp <= self.u_a):
                raise QuantError(
                    f"piecewise ordering violated: l_a={self.l_a} bp={self.bp} u_a={self.u_a}"
                )
            if min(-self.bp - self.l_a, self.u_a - self.bp) < EPS * 0.5 or self.bp < EPS * 0.5:
                raise QuantError(
                    f"degenerate piecewise region: l_a={self.l_a} bp={self.bp} u_a={self.u_a}"
                )

    def project(self, eps: float = EPS, keep_range: bool = False) -> None:
        """Restore ``l_a <= -bp - eps``, ``bp >= eps``, ``u_a >= bp + eps``, ``u_w >= eps``.

        By default ``l_a``/``u_a`` give way to ``bp``.  With ``keep_range`` the
        range is held fixed and ``bp`` is clamped into it instead.
        """
        if keep_range and self.kind == PIECEWISE:
            hi = min(-self.l_a, self.u_a) - eps
            bp = min(max(self.bp, eps), hi)
            # float32 rounding must not step over the bound
            while f32(bp) > hi and bp > eps:
                bp = float(np.nextafter(np.float32(bp), np.float32(0)))
            self.bp = f32(bp)
            return
        if self.kind == SYM_WEIGHT:
            self.u_w = f32(max(self.u_w, eps))
        elif self.kind == ASYM_ACT:
            if self.u_a < self.l_a + eps:
                mid = 0.5 * (self.l_a + self.u_a)
                self.l_a, self.u_a = f32(mid - eps), f32(mid + eps)
        else:
            bp = f32(max(self.bp, eps))
            self.bp = bp
            self.l_a = f32(min(self.l_a, -bp - eps))
            self.u_a = f32(max(self.u_a, bp + eps))

    def step_sizes(self) -> dict:
        if self.kind == SYM_WEIGHT:
            return {"weight": self.u_w / (2 ** (self.b - 1) - 1)}
        if self.kind == ASYM_ACT:
            return {"uniform": (self.u_a - self.l_a) / (2**self.b - 1)}
        n = 2 ** (self.b - 2) - 1
        return {
            "dense": 2 * self.bp / (2 ** (self.b - 1) - 1),
            "neg_outlier": (-self.bp - self.l_a) / n,
            "pos_outlier": (self.u_a - self.bp) / n,
        }

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "b": self.b}
        for name in ("l_a", "u_a", "bp", "u_w"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        out["learnable"] = dict(self.learnable)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def copy(self) -> "QuantParams":
        return replace(self, learnable=dict(self.learnable))


def dense_code_limit(b: int) -> int:
    """Largest dense code magnitude ``c = round((2**(b-1) - 1) / 2)`` (half away)."""
    return int(math.floor((2 ** (b - 1) - 1) / 2 + 0.5))


# ---------------------------------------------------------------------------
# uniform (activations) and symmetric (weights)


def _check_uniform(lo: float, hi: float, b: int) -> None:
    if not lo < hi:
        raise QuantError(f"uniform quantizer needs l < u, got l={lo} u={hi}")
    if b < 2:
        raise QuantError(f"uniform quantizer needs b >= 2, got {b}")


def quant_uniform(x, lo: float, hi: float, b: int) -> np.ndarray:
    """Integer codes in ``[0, 2**b - 1]``."""
    _check_uniform(lo, hi, b)
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return kernels.uniform_codes(arr, float(lo), float(hi), b)


def dequant_uniform(codes, lo: float, hi: float, b: int, dtype=np.float32) -> Tensor:
    _check_uniform(lo, hi, b)
    step = (hi - lo) / float(2**b - 1)
    return Tensor((np.asarray(codes, dtype=np.float64) * step + lo).astype(dtype))


def fake_quant_uniform(x: Tensor, lo, hi, b: int) -> Tensor:
    """Asymmetric uniform fake quantization; ``lo``/``hi`` may be scalar tensors."""
    lo_t, hi_t = _param(lo), _param(hi)
    lo_v, hi_v = lo_t.item(), hi_t.item()
    _check_uniform(lo_v, hi_v, b)
    out = kernels.uniform_fq(x.data, lo_v, hi_v, b)

    def bwd(g, needs):
        gx, g_lo, g_hi = kernels.uniform_bwd(x.data, lo_v, hi_v, b, g)
        return gx, g_lo, g_hi

    return record("fake_quant_uniform", out, (x, lo_t, hi_t), bwd)


def quant_sym_codes(w, u_w: float, b: int) -> np.ndarray:
    if not u_w > 0:
        raise QuantError(f"u_w must be > 0, got {u_w}")
    m = float(2 ** (b - 1) - 1)
    arr = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    v = np.clip(arr, -u_w, u_w) / u_w * m
    return np.copysign(np.floor(np.abs(v) + 0.5), v).astype(np.int64)


def quant_sym_weight(w: Tensor, u_w, b: int) -> Tensor:
    """Symmetric fake quantization with ``2**(b-1) - 1`` positive levels."""
    u_t = _param(u_w)
    u_v = u_t.item()
    if not u_v > 0:
        raise QuantError(f"u_w must be > 0, got {u_v}")
    out = kernels.sym_fq(w.data, u_v, b)

    def bwd(g, needs):
        gw, g_u = kernels.sym_bwd(w.data, u_v, b, g)
        return gw, g_u

    return record("quant_sym_weight", out, (w, u_t), bwd)


# ---------------------------------------------------------------------------
# piecewise linear


def _check_piecewise(la: float, ua: float, bp: float, b: int) -> None:
    if b < 3:
        raise QuantError(f"piecewise quantizer needs b >= 3, got {b}")
    if not (la <= -bp < 0 < bp <= ua):
        raise QuantError(f"piecewise ordering violated: l_a={la} bp={bp} u_a={ua}")
    if (-bp - la) <= 0 or (ua - bp) <= 0:
        raise QuantError(f"degenerate outlier region: l_a={la} bp={bp} u_a={ua}")


def quant_piecewise(x, params: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(regions, codes)``; ``regions`` holds :class:`Region` values."""
    la, ua, bp, b = params.l_a, params.u_a, params.bp, params.b
    _check_piecewise(la, ua, bp, b)
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return kernels.piecewise_codes(arr, la, ua, bp, b)


def dequant_piecewise(regions, codes, params: QuantParams, dtype=np.float32) -> Tensor:
    la, ua, bp, b = params.l_a, params.u_a, params.bp, params.b
    _check_piecewise(la, ua, bp, b)
    m = float(2 ** (b - 1) - 1)
    n = float(2 ** (b - 2) - 1)
    r = np.asarray(regions)
    c = np.asarray(codes, dtype=np.float64)
    qd = np.clip(c * ((2.0 * bp) / m), -bp, bp)
    qn = np.clip(c * ((-bp - la) / n) + la, la, -bp)
    qp = np.clip(c * ((ua - bp) / n) + bp, bp, ua)
    q = np.where(r == Region.NEG_OUTLIER.value, qn, np.where(r == Region.POS_OUTLIER.value, qp, qd))
    return Tensor(q.astype(dtype))


def fake_quant_piecewise(x: Tensor, l_a, u_a, bp, b: int) -> Tensor:
    """Fused piecewise quantize/dequantize with STE and fixed-code gradients."""
    la_t, ua_t, bp_t = _param(l_a), _param(u_a), _param(bp)
    la, ua, bpv = la_t.item(), ua_t.item(), bp_t.item()
    _check_piecewise(la, ua, bpv, b)
    out = kernels.piecewise_fq(x.data, la, ua, bpv, b)

    def bwd(g, needs):
        gx, g_la, g_ua, g_bp = kernels.piecewise_bwd(x.data, la, ua, bpv, b, g)
        return gx, g_la, g_ua, g_bp

    return record("fake_quant_piecewise", out, (x, la_t, ua_t, bp_t), bwd)


def piecewise_param_grads(x, params: QuantParams, upstream) -> dict:
    """Gradients of ``sum(upstream * fake_quant(x))`` for ``l_a``, ``u_a``, ``bp``."""
    la, ua, bp, b = params.l_a, params.u_a, params.bp, params.b
    _check_piecewise(la, ua, bp, b)
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    g = upstream.data if isinstance(upstream, Tensor) else np.asarray(upstream, dtype=arr.dtype)
    gx, g_la, g_ua, g_bp = kernels.piecewise_bwd(arr, la, ua, bp, b, g.astype(arr.dtype))
    return {"x": gx, "l_a": g_la, "u_a": g_ua, "bp": g_bp}


def fake_quant(x: Tensor, params: QuantParams, overrides: Optional[dict] = None) -> Tensor:
    """Apply the activation/weight quantizer described by ``params``.

    ``overrides`` maps field names to scalar tensors that take the place of
    the stored values (used to get parameter gradients during finetuning).
    """
    if not params.initialized:
        raise QuantError(f"{params.kind} parameters not initialized")
    ov = overrides or {}

    def get(name):
        return ov.get(name, getattr(params, name))

    if params.kind == SYM_WEIGHT:
        return quant_sym_weight(x, get("u_w"), params.b)
    if params.kind == ASYM_ACT:
        return fake_quant_uniform(x, get("l_a"), get("u_a"), params.b)
    return fake_quant_piecewise(x, get("l_a"), get("u_a"), get("bp"), params.b)


def _param(v) -> Tensor:
    if isinstance(v, Tensor):
        if v.size != 1:
            raise QuantError(f"quantizer parameter must be a scalar, got shape {v.shape}")
        return v
    return Tensor(np.asarray(v, dtype=np.float64).astype(np.float32))


def representable_values(params: QuantParams) -> np.ndarray:
    """Sorted distinct dequantized values reachable by ``params``."""
    if params.kind == PIECEWISE:
        c = dense_code_limit(params.b)
        n = 2 ** (params.b - 2) - 1
        regions = np.concatenate(
            [np.zeros(2 * c + 1), np.ones(n + 1), np.full(n + 1, 2)]
        ).astype(np.int8)
        codes = np.concatenate([np.arange(-c, c + 1), np.arange(n + 1), np.arange(n + 1)])
        vals = dequant_piecewise(regions, codes, params).data
    elif params.kind == ASYM_ACT:
        vals = dequant_uniform(np.arange(2**params.b), params.l_a, params.u_a, params.b).data
    else:
        m = 2 ** (params.b - 1) - 1
        vals = np.clip(np.arange(-m, m + 1) * (params.u_w / m), -params.u_w, params.u_w)
        vals = vals.astype(np.float32)
    return np.unique(vals)
