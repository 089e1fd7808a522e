"""Calibration: first-batch initialisation, EMA updates, layer sensitivity.

The first calibration batch sets ``u_w = max|W|``, ``l_a``/``u_a`` to the
activation min/max and ``bp`` to the 99th percentile of ``|activation|``.
Later batches move ``l_a``, ``u_a`` and ``bp`` by an exponential moving
average.  Layer sensitivities are the softmax over layers of each layer's
feature standard deviation, averaged over batches.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from plqsr import srnet
from plqsr import tensor as T
from plqsr.imaging import ImageRGB, center_crop
from plqsr.quant import ASYM_ACT, EPS, PIECEWISE, f32

log = logging.getLogger(__name__)


class CalibrationError(ValueError):
    pass


def percentile(values, p: float) -> float:
    """Nearest-rank percentile: element at rank ``ceil(p/100 * n)`` (rank 1 for p = 0)."""
    arr = np.asarray(values).reshape(-1)
    n = arr.size
    if n == 0:
        raise CalibrationError("percentile of an empty collection")
    if not 0 <= p <= 100:
        raise CalibrationError(f"percentile p must be in [0, 100], got {p}")
    rank = math.ceil(Fraction(str(p)) * n / 100)
    rank = min(max(rank, 1), n)
    return float(np.partition(arr, rank - 1)[rank - 1])


def ema_update(prev: float, observed: float, beta: float) -> float:
    if not 0.0 <= beta <= 1.0:
        raise CalibrationError(f"EMA beta must be in [0, 1], got {beta}")
    return beta * prev + (1.0 - beta) * observed


@dataclass
class CalibrationSet:
    batches: list  # float32 arrays, N x 3 x h x w, values in [0, 1]
    patch_size: int
    source: Optional[str] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.batches:
            raise CalibrationError("calibration set is empty")
        shape = self.batches[0].shape[1:]
        for b in self.batches:
            if b.shape[1:] != shape:
                raise CalibrationError("calibration batches must share patch shape")

    @property
    def n_batches(self) -> int:
        return len(self.batches)

    @property
    def n_images(self) -> int:
        return sum(b.shape[0] for b in self.batches)

    def images(self) -> np.ndarray:
        return np.concatenate(self.batches, axis=0)

    @classmethod
    def from_images(
        cls,
        images: Sequence[ImageRGB],
        batch_size: int = 16,
        patch_size: int = 48,
        source: Optional[str] = None,
        seed: Optional[int] = None,
    ) -> "CalibrationSet":
        """Centre-crop each LR image to ``patch_size`` and group into batches.

        ``seed``, when given, shuffles image order before batching.
        """
        imgs = list(images)
        if not imgs:
            raise CalibrationError("no calibration images")
        if seed is not None:
            order = np.random.default_rng(seed).permutation(len(imgs))
            imgs = [imgs[i] for i in order]
        arrs = np.stack([center_crop(im, patch_size).to_float() for im in imgs])
        batches = [arrs[i : i + batch_size] for i in range(0, len(arrs), batch_size)]
        return cls(batches, patch_size, source, seed)

    def manifest(self) -> dict:
        return {
            "source": self.source,
            "seed": self.seed,
            "patch_size": self.patch_size,
            "n_batches": self.n_batches,
            "batch_size": int(self.batches[0].shape[0]),
            "n_images": self.n_images,
        }


@dataclass
class SensitivityProfile:
    s: dict  # layer name -> weight

    def __post_init__(self):
        total = sum(self.s.values())
        if self.s and abs(total - 1.0) > 1e-6:
            raise CalibrationError(f"sensitivities sum to {total}, expected 1")

    @property
    def K(self) -> int:
        return len(self.s)

    @classmethod
    def from_stds(cls, mean_stds: dict) -> "SensitivityProfile":
        """Softmax over layers of batch-averaged feature standard deviations."""
        names = list(mean_stds)
        v = np.array([mean_stds[k] for k in names], dtype=np.float64)
        e = np.exp(v - v.max())
        s = e / e.sum()
        return cls(dict(zip(names, s.tolist())))

    @classmethod
    def uniform(cls, names: Iterable[str]) -> "SensitivityProfile":
        names = list(names)
        return cls({k: 1.0 / len(names) for k in names})

    def to_dict(self) -> dict:
        return dict(self.s)


@dataclass
class _LayerState:
    l_a: float = 0.0
    u_a: float = 0.0
    bp: float = 0.0
    stds: list = field(default_factory=list)
    trace: list = field(default_factory=list)


class ActivationCalibrator:
    """Accumulates per-layer statistics one batch at a time.

    ``kinds`` maps layer name to the activation quantizer kind.  ``observe``
    takes ``{layer: activation array}`` for one batch.
    """

    def __init__(self, kinds: dict, beta: float = 0.9, bp_percentile: float = 99.0):
        if not 0.0 <= beta <= 1.0:
            raise CalibrationError(f"EMA beta must be in [0, 1], got {beta}")
        self.kinds = dict(kinds)
        self.beta = beta
        self.bp_percentile = bp_percentile
        self.batches_seen = 0
        self.layers = {k: _LayerState() for k in self.kinds}

    def observe(self, feats: dict) -> None:
        missing = set(self.kinds) - set(feats)
        if missing:
            raise CalibrationError(f"batch lacks activations for {sorted(missing)}")
        first = self.batches_seen == 0
        for name, kind in self.kinds.items():
            a = np.asarray(feats[name], dtype=np.float64)
            st = self.layers[name]
            lo, hi = float(a.min()), float(a.max())
            bp = percentile(np.abs(a), self.bp_percentile) if kind == PIECEWISE else 0.0
            if first:
                st.l_a, st.u_a, st.bp = lo, hi, bp
            else:
                st.l_a = ema_update(st.l_a, lo, self.beta)
                st.u_a = ema_update(st.u_a, hi, self.beta)
                st.bp = ema_update(st.bp, bp, self.beta)
            st.stds.append(float(a.std()))
            st.trace.append({"l_a": st.l_a, "u_a": st.u_a, "bp": st.bp})
        self.batches_seen += 1

    def profile(self) -> SensitivityProfile:
        if self.batches_seen == 0:
            raise CalibrationError("no batches observed")
        return SensitivityProfile.from_stds(
            {k: float(np.mean(st.stds)) for k, st in self.layers.items()}
        )

    def apply(self, attachments: dict) -> None:
        """Write the accumulated ranges into each attachment's activation params."""
        for name, st in self.layers.items():
            q = attachments[name].activation
            if q.kind == PIECEWISE:
                bp = max(st.bp, EPS)
                q.bp = f32(bp)
                # one-sided distributions: keep an (empty) negative outlier region
                q.l_a = f32(min(st.l_a, -bp - EPS))
                q.u_a = f32(max(st.u_a, bp + EPS))
                q.project()
            elif q.kind == ASYM_ACT:
                lo, hi = st.l_a, st.u_a
                if hi - lo < EPS:
                    lo, hi = lo - EPS, hi + EPS
                q.l_a, q.u_a = f32(lo), f32(hi)
                q.project()


def init_weight_bounds(model: srnet.SrModel) -> None:
    """``u_w = max|W|`` for every attached weight quantizer (in place)."""
    reg = model.layer_registry
    for name, att in model.attachments.items():
        if att.weight is not None:
            att.weight.u_w = f32(max(float(np.abs(reg[name].weight.data).max()), EPS))


def calibrate(
    model: srnet.SrModel,
    cal_set: CalibrationSet,
    beta: float = 0.9,
    bp_percentile: float = 99.0,
):
    """One pass over ``cal_set`` in full precision.

    Returns ``(calibrated_model, SensitivityProfile, report)``; the input model
    is left unchanged.
    """
    if not model.attachments:
        raise CalibrationError("model has no quantizer attachments")
    if cal_set is None or not cal_set.batches:
        raise CalibrationError("calibration set is empty")
    out = model.with_attachments({k: a.copy() for k, a in model.attachments.items()})
    init_weight_bounds(out)
    kinds = {k: a.activation.kind for k, a in out.attachments.items() if a.activation is not None}
    cal = ActivationCalibrator(kinds, beta=beta, bp_percentile=bp_percentile)
    for batch in cal_set.batches:
        _, feats = srnet.forward(out, T.Tensor(batch), "full_precision", capture=kinds)
        cal.observe({k: v.data for k, v in feats.items()})
    cal.apply(out.attachments)
    profile = cal.profile()
    report = {
        "beta": beta,
        "bp_percentile": bp_percentile,
        "batches": cal.batches_seen,
        "mean_std": {k: float(np.mean(st.stds)) for k, st in cal.layers.items()},
        "sensitivity": profile.to_dict(),
        "params": out.quant_params(),
    }
    return out, profile, report


def clip_outliers_fp(
    model: srnet.SrModel,
    x,
    fraction: float,
    layers: Optional[Iterable[str]] = None,
) -> T.Tensor:
    """Full-precision forward with each layer's conv output clamped to its
    ``[fraction/2, 1 - fraction/2]`` nearest-rank percentile band (per tensor).

    ``layers`` defaults to the attached layers, or every conv when the model
    carries no attachments.
    """
    if not 0.0 < fraction < 1.0:
        raise CalibrationError(f"clip fraction must be in (0, 1), got {fraction}")
    targets = set(layers) if layers is not None else set(model.attachments or model.layer_names)
    lo_p = 100.0 * fraction / 2.0
    hi_p = 100.0 - lo_p

    def hook(name, y):
        if name not in targets:
            return y
        lo = percentile(y.data, lo_p)
        hi = percentile(y.data, hi_p)
        return T.Tensor(np.clip(y.data, lo, hi))

    out, _ = srnet.forward(model, x, "full_precision", act_hook=hook)
    return out


def sensitivity_profile(model: srnet.SrModel, cal_set: CalibrationSet) -> SensitivityProfile:
    """Sensitivity of every activation-quantized layer, leaving params untouched."""
    kinds = {k: a.activation.kind for k, a in model.attachments.items() if a.activation is not None}
    if not kinds:
        raise CalibrationError("model has no activation quantizers")
    cal = ActivationCalibrator(kinds)
    for batch in cal_set.batches:
        _, feats = srnet.forward(model, T.Tensor(batch), "full_precision", capture=kinds)
        cal.observe({k: v.data for k, v in feats.items()})
    return cal.profile()
