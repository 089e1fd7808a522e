"""Simple PTQ baselines and the two diagnostic experiments.

Baselines calibrate asymmetric uniform activation quantizers three ways
(running min/max, rank percentiles, MSE-optimal shrink of the min/max range).
The analysis side runs the per-layer activation sensitivity sweep, the
four-variant ablation grid and the outlier-clipping experiment.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from plqsr import kernels, srnet
from plqsr import tensor as T
from plqsr.calibrate import (
    ActivationCalibrator,
    CalibrationError,
    CalibrationSet,
    SensitivityProfile,
    calibrate,
    clip_outliers_fp,
    ema_update,
    init_weight_bounds,
    percentile,
)
from plqsr.finetune import FinetuneConfig, finetune
from plqsr.imaging import chroma_mean, psnr_y, ssim_y
from plqsr.quant import ASYM_ACT, EPS, QuantParams, f32

log = logging.getLogger(__name__)

BASELINE_KINDS = ("minmax", "percentile", "mse")
VARIANTS = ("minmax", "+PLQ", "+PLQ+VFT", "+PLQ+SAFT")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str = "minmax"
    p: float = 99.0  # percentile kind only
    grid: int = 32  # mse kind only

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"baseline kind must be one of {BASELINE_KINDS}, got {self.kind!r}")
        if not 50.0 < self.p <= 100.0:
            raise ValueError(f"percentile p must be in (50, 100], got {self.p}")
        if self.grid < 8:
            raise ValueError(f"mse grid resolution must be >= 8, got {self.grid}")


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(model: srnet.SrModel, pairs: Sequence, mode: str = "full_precision", crop: Optional[int] = None):
    """Y-channel PSNR / SSIM of ``model`` on ``[(name, lr, hr)]``.

    Returns ``(rows, outputs)``: one metrics dict per image and the float
    (3, H, W) predictions.  ``crop`` defaults to the model scale.
    """
    crop = model.scale if crop is None else crop
    rows, outputs = [], []
    for name, lr, hr in pairs:
        out = srnet.predict(model, lr.to_float()[None], mode)[0]
        outputs.append(out)
        rows.append({"image": name, "psnr": psnr_y(out, hr, crop), "ssim": ssim_y(out, hr, crop)})
    return rows, outputs


def mean_metrics(rows: Sequence[dict]) -> dict:
    if not rows:
        return {"psnr": float("nan"), "ssim": float("nan")}
    return {
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
    }


# ---------------------------------------------------------------------------
# baseline calibration


def _act_layers(model: srnet.SrModel) -> dict:
    out = {}
    for name, att in model.attachments.items():
        if att.activation is None:
            continue
        if att.activation.kind != ASYM_ACT:
            raise CalibrationError(f"layer {name}: baselines need uniform activation quantizers")
        out[name] = att.activation.b
    return out


def _fp_batches(model, cal_set, layers):
    for batch in cal_set.batches:
        _, feats = srnet.forward(model, T.Tensor(batch), "full_precision", capture=layers)
        yield {k: v.data for k, v in feats.items()}


def _mse_search(model, cal_set, ranges: dict, bits: dict, grid: int) -> dict:
    """Pick ``alpha`` in ``{1/grid, ..., 1}`` minimising fake-quant MSE of ``[alpha*l, alpha*u]``."""
    alphas = [i / grid for i in range(1, grid + 1)]
    sse = {k: np.zeros(grid) for k in ranges}
    count = dict.fromkeys(ranges, 0)
    for feats in _fp_batches(model, cal_set, ranges):
        for name, (lo, hi) in ranges.items():
            a = np.ascontiguousarray(feats[name])
            for i, al in enumerate(alphas):
                l_i, u_i = f32(al * lo), f32(al * hi)
                if u_i - l_i < EPS:
                    sse[name][i] = np.inf
                    continue
                q = kernels.uniform_fq(a, l_i, u_i, bits[name])
                sse[name][i] += float(np.sum((q.astype(np.float64) - a) ** 2))
            count[name] += a.size
    out = {}
    for name, (lo, hi) in ranges.items():
        mse = sse[name] / count[name]
        # ties resolve towards the wider range
        best = max(range(grid), key=lambda i: (-mse[i], i))
        out[name] = {"alpha": alphas[best], "mse": float(mse[best]), "mse_full": float(mse[-1])}
    return out


def calibrate_baseline(model: srnet.SrModel, cal_set: CalibrationSet, spec: BaselineSpec, beta: float = 0.9):
    """Calibrate uniform activation quantizers of ``model`` with a baseline rule.

    ``model`` must carry uniform (asymmetric) activation attachments.  Weight
    bounds are ``max|W|`` as in the main method.  Per-batch statistics are
    folded across batches with the same EMA as the main calibrator.  Returns
    ``(calibrated_model, report)``.
    """
    bits = _act_layers(model)
    if cal_set is None or not cal_set.batches:
        raise CalibrationError("calibration set is empty")
    out = model.with_attachments({k: a.copy() for k, a in model.attachments.items()})
    init_weight_bounds(out)

    report = {"baseline": asdict(spec), "beta": beta}
    if spec.kind == "percentile":
        lo_p = 100.0 - spec.p
        state = {}
        for feats in _fp_batches(out, cal_set, bits):
            for name in bits:
                a = feats[name]
                lo, hi = percentile(a, lo_p), percentile(a, spec.p)
                if name in state:
                    plo, phi = state[name]
                    lo, hi = ema_update(plo, lo, beta), ema_update(phi, hi, beta)
                state[name] = (lo, hi)
        ranges = state
    else:
        cal = ActivationCalibrator({k: ASYM_ACT for k in bits}, beta=beta)
        for feats in _fp_batches(out, cal_set, bits):
            cal.observe(feats)
        ranges = {k: (st.l_a, st.u_a) for k, st in cal.layers.items()}
        if spec.kind == "mse":
            search = _mse_search(out, cal_set, ranges, bits, spec.grid)
            report["mse_search"] = search
            ranges = {k: (search[k]["alpha"] * lo, search[k]["alpha"] * hi) for k, (lo, hi) in ranges.items()}

    for name, (lo, hi) in ranges.items():
        if hi - lo < EPS:
            lo, hi = lo - EPS, hi + EPS
        q = out.attachments[name].activation
        q.l_a, q.u_a = f32(lo), f32(hi)
        q.project()
    report["params"] = out.quant_params()
    return out, report


def baseline_params(model, cal_set, spec: BaselineSpec, bits: int = 4, beta: float = 0.9) -> dict:
    """Layer name -> calibrated uniform activation :class:`QuantParams` for every conv."""
    atts = {
        name: srnet.QuantAttachment(name, None, QuantParams(ASYM_ACT, bits)) for name in model.layer_names
    }
    cal, _ = calibrate_baseline(model.with_attachments(atts), cal_set, spec, beta)
    return {k: a.activation for k, a in cal.attachments.items()}


# ---------------------------------------------------------------------------
# per-layer sensitivity sweep


@dataclass
class SweepResult:
    bits: int
    fp_psnr: float
    records: list = field(default_factory=list)  # {layer, psnr, drop}

    @property
    def drops(self) -> list:
        return [r["drop"] for r in self.records]

    @property
    def spread(self) -> float:
        return max(self.drops) - min(self.drops) if self.records else 0.0

    def to_dict(self) -> dict:
        return {"bits": self.bits, "fp_psnr": self.fp_psnr, "spread": self.spread, "records": list(self.records)}

    def to_csv(self) -> str:
        return rows_to_csv(self.records, ("layer", "psnr", "drop"))


def layer_sweep(
    model: srnet.SrModel,
    eval_pairs: Sequence,
    cal_set: CalibrationSet,
    bits: int = 4,
    layers: Optional[Sequence[str]] = None,
    crop: Optional[int] = None,
) -> SweepResult:
    """Quantize the activations of one layer at a time (min/max, ``bits``) and
    record mean Y-PSNR and its drop against full precision.

    Weights stay full precision.  Records follow registry order.
    """
    base = model.with_attachments({})
    fp_rows, _ = evaluate_model(base, eval_pairs, crop=crop)
    fp_psnr = mean_metrics(fp_rows)["psnr"]
    params = baseline_params(base, cal_set, BaselineSpec("minmax"), bits)
    names = list(layers) if layers is not None else base.layer_names
    result = SweepResult(bits, fp_psnr)
    for name in names:
        single = base.with_attachments({name: srnet.QuantAttachment(name, None, params[name].copy())})
        rows, _ = evaluate_model(single, eval_pairs, "quantized", crop=crop)
        psnr = mean_metrics(rows)["psnr"]
        result.records.append({"layer": name, "psnr": psnr, "drop": fp_psnr - psnr})
        log.info("sweep %s: %.3f dB (drop %.3f)", name, psnr, fp_psnr - psnr)
    return result


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class AblationResult:
    w_bits: int
    a_bits: int
    rows: list = field(default_factory=list)  # {variant, psnr, ssim}
    per_image: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def psnr(self, variant: str) -> float:
        for r in self.rows:
            if r["variant"] == variant:
                return r["psnr"]
        raise KeyError(variant)

    def to_dict(self) -> dict:
        return {
            "w_bits": self.w_bits,
            "a_bits": self.a_bits,
            "rows": list(self.rows),
            "per_image": self.per_image,
            "details": self.details,
        }

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, ("variant", "psnr", "ssim"))


def ablation_grid(
    model: srnet.SrModel,
    cal_set: CalibrationSet,
    eval_pairs: Sequence,
    w_bits: int = 4,
    a_bits: int = 4,
    config: Optional[FinetuneConfig] = None,
    first_last: str = "8bit",
    beta: float = 0.9,
    crop: Optional[int] = None,
) -> AblationResult:
    """Evaluate min/max, +PLQ, +PLQ+VFT and +PLQ+SAFT on the same weights and data.

    VFT is the same finetuning run with every layer weighted ``1/K``.
    """
    config = config or FinetuneConfig()
    base = model.with_attachments({})
    res = AblationResult(w_bits, a_bits)

    def record(variant, m, extra=None):
        rows, _ = evaluate_model(m, eval_pairs, "quantized", crop=crop)
        res.rows.append({"variant": variant, **mean_metrics(rows)})
        res.per_image[variant] = rows
        if extra is not None:
            res.details[variant] = extra
        log.info("ablation %s: %.3f dB", variant, res.rows[-1]["psnr"])

    uni = srnet.attach_quantizers(base, w_bits, a_bits, "uniform", first_last)
    mm, _ = calibrate_baseline(uni, cal_set, BaselineSpec("minmax"), beta)
    record("minmax", mm)

    plq = srnet.attach_quantizers(base, w_bits, a_bits, "plq", first_last)
    plq, profile, _ = calibrate(plq, cal_set, beta)
    record("+PLQ", plq)

    vft, hist = finetune(plq, cal_set, SensitivityProfile.uniform(profile.s), config)
    record("+PLQ+VFT", vft, {"initial": hist["initial"], "final": hist["final"]})

    saft, hist = finetune(plq, cal_set, profile, config)
    record("+PLQ+SAFT", saft, {"initial": hist["initial"], "final": hist["final"], "sensitivity": profile.to_dict()})
    return res


# ---------------------------------------------------------------------------
# outlier clipping


def clip_experiment(
    model: srnet.SrModel,
    eval_pairs: Sequence,
    fraction: float = 0.01,
    crop: Optional[int] = None,
) -> dict:
    """Full-precision outputs with and without clipping ``fraction`` of each
    layer's activation outliers.

    Returns per-image PSNR against HR for both, the PSNR drop, the PSNR of the
    clipped output against the plain one, and the mean
    (Cb, Cr) of both outputs; ``outputs`` holds ``(plain, clipped)`` arrays.
    """
    base = model.with_attachments({})
    crop = base.scale if crop is None else crop
    rows, outputs = [], []
    for name, lr, hr in eval_pairs:
        x = T.Tensor(lr.to_float()[None])
        plain = srnet.predict(base, x)[0]
        clipped = clip_outliers_fp(base, x, fraction).data[0]
        p0, p1 = psnr_y(plain, hr, crop), psnr_y(clipped, hr, crop)
        cb0, cr0 = chroma_mean(plain)
        cb1, cr1 = chroma_mean(clipped)
        rows.append(
            {
                "image": name,
                "psnr_plain": p0,
                "psnr_clipped": p1,
                "psnr_drop": p0 - p1,
                "psnr_vs_plain": psnr_y(clipped, plain, crop),
                "cb_plain": cb0,
                "cr_plain": cr0,
                "cb_clipped": cb1,
                "cr_clipped": cr1,
                "chroma_shift": float(np.hypot(cb1 - cb0, cr1 - cr0)),
            }
        )
        outputs.append((plain, clipped))
    return {"fraction": fraction, "rows": rows, "outputs": outputs}


# ---------------------------------------------------------------------------
# tables


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def text_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Aligned plain-text table; floats with 4 decimals."""

    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [list(columns)] + [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True)
