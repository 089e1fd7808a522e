import json
import math

import numpy as np
import pytest

from plqsr import calibrate as C
from plqsr import finetune as F
from plqsr import srnet
from plqsr import tensor as T
from plqsr.quant import EPS, QuantError

from tests.conftest import tiny_cal_set, tiny_model

GROUP_FIELDS = {"u_w": {"u_w"}, "range": {"l_a", "u_a"}, "bp": {"bp"}}


@pytest.fixture(scope="module")
def calibrated():
    m = srnet.attach_quantizers(tiny_model(seed=1), 4, 4)
    cs = tiny_cal_set(4, batch_size=2)
    q, prof, _ = C.calibrate(m, cs)
    return q, cs, prof


# ---------------------------------------------------------------------------
# losses


def test_loss_rec_examples():
    a = T.Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    assert F.loss_rec(a, a).item() == 0.0
    assert F.loss_rec(a, T.Tensor(a.data + 0.1)).item() == pytest.approx(0.1)
    with pytest.raises(T.ShapeError):
        F.loss_rec(a, T.Tensor(np.zeros((1, 3, 4, 4))))


def test_loss_rec_gradient():
    rng = np.random.default_rng(1)
    fp = T.Tensor(rng.standard_normal((2, 3, 2, 2)))
    q = T.Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
    with T.GradTape() as tape:
        loss = F.loss_rec(fp, q)
    g = T.backward(tape, loss)[q].data
    np.testing.assert_allclose(g, np.sign(q.data - fp.data) / q.data.size)


def test_loss_sen_examples():
    a = np.zeros((1, 2, 1, 1))
    b = np.zeros((1, 2, 1, 1))
    a[0, 0], b[0, 1] = 1.0, 1.0
    other = np.random.default_rng(2).standard_normal((1, 3, 2, 2))
    fp = {"l1": T.Tensor(a), "l2": T.Tensor(other)}
    q = {"l1": T.Tensor(b), "l2": T.Tensor(other)}
    prof = C.SensitivityProfile({"l1": 0.3, "l2": 0.7})
    sen, skipped = F.loss_sen(fp, q, prof)
    assert sen.item() == pytest.approx(0.3 * math.sqrt(2))
    assert skipped == 0
    assert F.loss_sen(fp, fp, prof)[0].item() == 0.0


def test_loss_sen_scale_invariance():
    rng = np.random.default_rng(3)
    f = {k: T.Tensor(rng.standard_normal((2, 3, 4, 4))) for k in ("a", "b")}
    g = {k: T.Tensor(rng.standard_normal((2, 3, 4, 4))) for k in ("a", "b")}
    prof = C.SensitivityProfile({"a": 0.4, "b": 0.6})
    assert F.loss_sen(f, {k: T.Tensor(2 * v.data) for k, v in f.items()}, prof)[0].item() == pytest.approx(0, abs=1e-12)
    base = F.loss_sen(f, g, prof)[0].item()
    fs = {"a": T.Tensor(3 * f["a"].data), "b": T.Tensor(0.5 * f["b"].data)}
    gs = {"a": T.Tensor(7 * g["a"].data), "b": T.Tensor(2 * g["b"].data)}
    assert F.loss_sen(fs, gs, prof)[0].item() == pytest.approx(base, rel=1e-12)


def test_loss_sen_key_errors():
    f = {"a": T.Tensor(np.ones((1, 1, 2, 2)))}
    with pytest.raises(KeyError):
        F.loss_sen(f, {"b": f["a"]}, C.SensitivityProfile({"a": 1.0}))
    with pytest.raises(KeyError):
        F.loss_sen(f, f, C.SensitivityProfile({"b": 1.0}))


def test_loss_sen_zero_map_skipped():
    f = {"a": T.Tensor(np.ones((2, 1, 2, 2)))}
    z = np.ones((2, 1, 2, 2))
    z[1] = 0
    sen, skipped = F.loss_sen(f, {"a": T.Tensor(z)}, C.SensitivityProfile({"a": 1.0}))
    assert skipped == 1 and np.isfinite(sen.item())


def test_loss_all_examples():
    t = lambda v: T.Tensor(np.float64(v))
    assert F.loss_all(t(0.1), t(0.2), 5).item() == pytest.approx(0.7)
    assert F.loss_all(t(0.1), t(0.2), 0).item() == pytest.approx(0.2)
    assert F.loss_all(t(0.0), t(0.0), 5).item() == 0.0


# ---------------------------------------------------------------------------
# schedule


def test_stage_sequence():
    assert [F.stage_for_epoch(e) for e in range(1, 8)] == ["u_w", "range", "bp", "u_w", "range", "bp", "u_w"]
    with pytest.raises(ValueError):
        F.stage_for_epoch(0)


def test_lr_decay():
    cfg = F.FinetuneConfig()
    assert F.lr_at_epoch(cfg, 1) == 1e-3
    # nine decays precede epoch 10; 4.30e-4 is the rate after eight
    assert F.lr_at_epoch(cfg, 10) == pytest.approx(1e-3 * 0.9**9)
    assert F.lr_at_epoch(cfg, 10) == pytest.approx(3.874e-4, abs=5e-7)
    assert F.lr_at_epoch(cfg, 9) == pytest.approx(4.30e-4, abs=5e-7)


def test_config_defaults_and_validation():
    cfg = F.FinetuneConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.lr_decay, cfg.lam) == (10, 2, 1e-3, 0.9, 5.0)
    with pytest.raises(ValueError):
        F.FinetuneConfig(batch_size=0)
    with pytest.raises(ValueError):
        F.FinetuneConfig(lam=-1)


# ---------------------------------------------------------------------------
# optimisation loop


def test_staged_freeze_and_ordering(calibrated):
    q, cs, prof = calibrated
    steps = []
    _, hist = F.finetune(q, cs, prof, F.FinetuneConfig(epochs=6, lr=1e-2), on_step=steps.append)
    prev = F.snapshot(q)
    assert [r["stage"] for r in hist["epochs"]] == ["u_w", "range", "bp"] * 2
    for rec in steps:
        active = GROUP_FIELDS[rec["stage"]]
        for layer, row in rec["params"].items():
            for fld, v in row.items():
                if fld not in active:
                    assert v == prev[layer][fld], (rec["epoch"], layer, fld)
            if "bp" in row:
                assert row["l_a"] <= -row["bp"] - EPS * (1 - 1e-3)
                assert row["bp"] < row["u_a"] - EPS * (1 - 1e-3)
        prev = rec["params"]
    # each group actually moved during its own epochs
    moved = {s: False for s in GROUP_FIELDS}
    before = F.snapshot(q)
    for rec in steps:
        for layer, row in rec["params"].items():
            for fld in GROUP_FIELDS[rec["stage"]]:
                if fld in row and row[fld] != before[layer][fld]:
                    moved[rec["stage"]] = True
    assert all(moved.values())


def test_weights_never_change(calibrated):
    q, cs, prof = calibrated
    out, _ = F.finetune(q, cs, prof, F.FinetuneConfig(epochs=3))
    for k, v in q.state_dict().items():
        assert np.array_equal(out.state_dict()[k], v)


def test_input_model_not_mutated(calibrated):
    q, cs, prof = calibrated
    before = q.quant_params()
    F.finetune(q, cs, prof, F.FinetuneConfig(epochs=2))
    assert q.quant_params() == before


def test_deterministic(calibrated):
    q, cs, prof = calibrated
    cfg = F.FinetuneConfig(epochs=3, seed=5)
    a, _ = F.finetune(q, cs, prof, cfg)
    b, _ = F.finetune(q, cs, prof, cfg)
    assert a.quant_params() == b.quant_params()


def test_log_records(calibrated, tmp_path):
    q, cs, prof = calibrated
    _, hist = F.finetune(q, cs, prof, F.FinetuneConfig(epochs=2), log_path=tmp_path / "log.jsonl")
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    assert set(lines[0]) >= {"epoch", "stage", "lr", "L_rec", "L_sen", "L_all", "params"}
    assert lines[1]["lr"] == pytest.approx(0.9e-3)
    assert hist["adam"]["beta1"] == 0.9


def test_keep_range_projection_moves_only_bp():
    from plqsr.quant import PIECEWISE, QuantParams

    p = QuantParams(PIECEWISE, 4, l_a=-0.5, u_a=0.8, bp=0.9)
    p.project(keep_range=True)
    assert (p.l_a, p.u_a) == (np.float32(-0.5), np.float32(0.8))
    assert p.bp <= 0.5 - EPS
    p.validate()


def test_requires_calibration():
    m = srnet.attach_quantizers(tiny_model(), 4, 4)
    with pytest.raises(QuantError):
        F.finetune(m, tiny_cal_set(), C.SensitivityProfile.uniform(m.layer_names))


def test_loss_does_not_worsen(calibrated):
    q, cs, prof = calibrated
    _, hist = F.finetune(q, cs, prof, F.FinetuneConfig(epochs=10))
    assert hist["final"]["L_all"] <= hist["initial"]["L_all"]
