"""Staged, sensitivity-weighted finetuning of quantizer parameters.

Only quantizer parameters move; network weights stay fixed.  Epochs cycle
through three parameter groups (weight bounds, activation range, breakpoint),
one group trainable per epoch.  The objective is

    L_all = L_sen + lambda * L_rec

with ``L_rec`` the mean absolute difference between full-precision and
quantized outputs and ``L_sen`` the sensitivity-weighted sum over layers of
the distance between L2-normalised full-precision and quantized feature maps.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from plqsr import srnet
from plqsr import tensor as T
from plqsr.calibrate import CalibrationSet, SensitivityProfile
from plqsr.optim import Adam
from plqsr.quant import PIECEWISE, QuantError, f32

log = logging.getLogger(__name__)

GROUPS = {
    "u_w": ("u_w",),
    "range": ("l_a", "u_a"),
    "bp": ("bp",),
}
GROUP_ORDER = ("u_w", "range", "bp")


@dataclass
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 2
    lr: float = 1e-3
    lr_decay: float = 0.9
    lam: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        for name in ("batch_size",):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0 or not 0 < self.lr_decay <= 1 or self.lam < 0:
            raise ValueError("need lr >= 0, 0 < lr_decay <= 1, lambda >= 0")


def stage_for_epoch(epoch: int) -> str:
    """Parameter group trained in 1-based ``epoch``: u_w, range, bp, u_w, ..."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    r = epoch % 3
    return "u_w" if r == 1 else "range" if r == 2 else "bp"


def lr_at_epoch(config: FinetuneConfig, epoch: int) -> float:
    return config.lr * config.lr_decay ** (epoch - 1)


# ---------------------------------------------------------------------------
# losses


def loss_rec(fp_out: T.Tensor, q_out: T.Tensor) -> T.Tensor:
    if fp_out.shape != q_out.shape:
        raise T.ShapeError(f"loss_rec: shape mismatch {fp_out.shape} vs {q_out.shape}")
    return T.l1_diff(q_out, fp_out)


def loss_sen(captured_fp: dict, captured_q: dict, profile: SensitivityProfile):
    """Return ``(loss, skipped_terms)``.

    Layers are visited in ``profile`` order so the accumulation order is fixed.
    """
    if set(captured_fp) != set(captured_q):
        raise KeyError("loss_sen: full-precision and quantized captures cover different layers")
    missing = set(captured_fp) - set(profile.s)
    if missing:
        raise KeyError(f"loss_sen: no sensitivity for {sorted(missing)}")
    terms = []
    skipped = 0
    for name, s in profile.s.items():
        if name not in captured_fp:
            continue
        d, n_skip = T.normalized_l2_diff(captured_fp[name], captured_q[name])
        if n_skip:
            log.warning("loss_sen: %d zero-norm feature map(s) at %s skipped", n_skip, name)
            skipped += n_skip
        terms.append(T.scalar_mul(d, s))
    return T.stack_scalars(terms), skipped


def loss_all(rec: T.Tensor, sen: T.Tensor, lam: float) -> T.Tensor:
    return T.add(sen, T.scalar_mul(rec, lam))


# ---------------------------------------------------------------------------
# training loop


def _act_layers(model: srnet.SrModel) -> list:
    return [k for k, a in model.attachments.items() if a.activation is not None]


def group_members(model: srnet.SrModel, group: str) -> list:
    """``(layer, field)`` pairs trained in ``group``."""
    out = []
    for name, att in model.attachments.items():
        if group == "u_w" and att.weight is not None:
            out.append((name, "u_w"))
        elif group == "range" and att.activation is not None:
            out += [(name, "l_a"), (name, "u_a")]
        elif group == "bp" and att.activation is not None and att.activation.kind == PIECEWISE:
            out.append((name, "bp"))
    return out


def _params_of(model, layer, fld):
    att = model.attachments[layer]
    return att.weight if fld == "u_w" else att.activation


def snapshot(model: srnet.SrModel) -> dict:
    out = {}
    for name, att in model.attachments.items():
        row = {}
        if att.activation is not None:
            row["l_a"] = att.activation.l_a
            row["u_a"] = att.activation.u_a
            if att.activation.kind == PIECEWISE:
                row["bp"] = att.activation.bp
        if att.weight is not None:
            row["u_w"] = att.weight.u_w
        out[name] = row
    return out


def step_losses(model, fp_model, x: T.Tensor, profile, lam, overrides=None):
    """Forward both networks on ``x``; the full-precision pass is detached."""
    layers = list(profile.s)
    # nothing in the full-precision pass is tracked, so it records no tape nodes
    fp_out, fp_feats = srnet.forward(fp_model, x, "full_precision", capture=layers)
    q_out, q_feats = srnet.forward(model, x, "quantized", capture=layers, overrides=overrides)
    rec = loss_rec(fp_out, q_out)
    sen, skipped = loss_sen(fp_feats, q_feats, profile)
    return rec, sen, loss_all(rec, sen, lam), skipped


def evaluate_loss(model, cal_set: CalibrationSet, profile, lam: float, batch_size: int = 2) -> dict:
    """Mean L_rec / L_sen / L_all over the whole calibration set."""
    imgs = cal_set.images()
    tot = np.zeros(3)
    count = 0
    for i in range(0, len(imgs), batch_size):
        rec, sen, allv, _ = step_losses(model, model, T.Tensor(imgs[i : i + batch_size]), profile, lam)
        tot += [rec.item(), sen.item(), allv.item()]
        count += 1
    rec, sen, allv = (float(v) for v in tot / count)
    return {"L_rec": rec, "L_sen": sen, "L_all": allv}


def finetune(
    model: srnet.SrModel,
    cal_set: CalibrationSet,
    profile: SensitivityProfile,
    config: Optional[FinetuneConfig] = None,
    log_path=None,
    on_step: Optional[Callable[[dict], None]] = None,
):
    """Optimise quantizer parameters of a calibrated ``model``.

    Returns ``(finetuned_model, history)``; ``history`` holds one record per
    epoch (the same records written as JSON lines to ``log_path``) plus the
    calibration-set loss before and after.
    """
    config = config or FinetuneConfig()
    for name, att in model.attachments.items():
        for q in (att.weight, att.activation):
            if q is not None and not q.initialized:
                raise QuantError(f"layer {name}: calibrate before finetuning")
    missing = set(_act_layers(model)) - set(profile.s)
    if missing:
        raise ValueError(f"sensitivity profile lacks layers {sorted(missing)}")

    fp_model = model.with_attachments({})
    cur = model.with_attachments({k: a.copy() for k, a in model.attachments.items()})
    opt = Adam(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    imgs = cal_set.images()
    rng = np.random.default_rng(config.seed)

    history = {
        "config": asdict(config),
        "adam": opt.hyperparameters(),
        "initial": evaluate_loss(cur, cal_set, profile, config.lam),
        "epochs": [],
    }
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            stage = stage_for_epoch(epoch)
            opt.lr = lr_at_epoch(config, epoch)
            members = group_members(cur, stage)
            order = rng.permutation(len(imgs)) if config.shuffle else np.arange(len(imgs))
            sums = np.zeros(3)
            steps = 0
            skipped_total = 0
            for i in range(0, len(imgs), config.batch_size):
                x = T.Tensor(imgs[order[i : i + config.batch_size]])
                ptensors = {
                    key: T.Tensor(np.float32(getattr(_params_of(cur, *key), key[1])), requires_grad=True)
                    for key in members
                }
                with T.GradTape() as tape:
                    rec, sen, loss, skipped = step_losses(cur, fp_model, x, profile, config.lam, ptensors)
                if not np.isfinite(loss.item()):
                    raise T.NumericError(f"non-finite loss at epoch {epoch}, step {steps}")
                grads = T.backward(tape, loss)
                for key, t in ptensors.items():
                    g = grads.get(t)
                    if g is None:
                        continue
                    q = _params_of(cur, *key)
                    setattr(q, key[1], f32(opt.step(key, getattr(q, key[1]), g.data).item()))
                for layer in sorted({k[0] for k in members}):
                    att = cur.attachments[layer]
                    for q in (att.weight, att.activation):
                        if q is not None:
                            # a frozen range must not move when bp is projected
                            q.project(keep_range=stage == "bp")
                sums += [rec.item(), sen.item(), loss.item()]
                steps += 1
                skipped_total += skipped
                if on_step is not None:
                    on_step({"epoch": epoch, "stage": stage, "step": steps, "L_all": loss.item(), "params": snapshot(cur)})
            means = sums / max(steps, 1)
            record = {
                "epoch": epoch,
                "stage": stage,
                "lr": opt.lr,
                "L_rec": float(means[0]),
                "L_sen": float(means[1]),
                "L_all": float(means[2]),
                "skipped_terms": skipped_total,
                "params": snapshot(cur),
            }
            history["epochs"].append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log.info("epoch %d [%s] lr=%.3g L_all=%.5f", epoch, stage, opt.lr, means[2])
    finally:
        if log_fh:
            log_fh.close()
    history["final"] = evaluate_loss(cur, cal_set, profile, config.lam)
    return cur, history
