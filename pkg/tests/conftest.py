import json

import numpy as np
import pytest

from plqsr import calibrate as C
from plqsr import imaging as im
from plqsr import srnet


def tiny_model(blocks=1, channels=4, seed=0):
    return srnet.build_edsr(scale=2, n_blocks=blocks, channels=channels, seed=seed)


def tiny_cal_set(n=4, patch=8, batch_size=2, seed=0):
    imgs = [im.synth_image(k, seed + i, (patch, patch)) for i, k in enumerate(["gaussian-noise", "color-wheel", "ramp", "checker"] * n)][:n]
    return C.CalibrationSet.from_images(imgs, batch_size=batch_size, patch_size=patch)


def tiny_pairs(n=2, size=16, seed=0):
    kinds = ["color-wheel", "gaussian-noise", "ramp", "checker"]
    out = []
    for i in range(n):
        hr = im.synth_image(kinds[i % len(kinds)], seed + i, (size, size))
        out.append((f"img{i}", im.bicubic_resize(hr, 0.5), hr))
    return out


SMALL_CONFIG = {
    "arch.blocks": 1,
    "arch.channels": 4,
    "train.hr_patch": 16,
    "train.per_image": 1,
    "train.batch_size": 4,
    "calib.patch": 8,
    "calib.batch_size": 2,
}


def make_cli_workspace(root):
    """Tiny manifest, a config shrinking the model, and a briefly trained model."""
    from plqsr import cli

    entries = []
    for i in range(12):
        split = "train" if i < 6 else "cal" if i < 10 else "eval"
        path = root / f"img{i}.png"
        im.write_png(im.synth_image(im.SYNTH_KINDS[i % 4], i, (32, 32)), path)
        entries.append(im.ManifestEntry(hr=str(path), split=split, factor=2))
    manifest = root / "manifest.json"
    im.write_manifest(entries, manifest)
    config = root / "config.json"
    config.write_text(json.dumps({**SMALL_CONFIG, "manifest": str(manifest)}))
    rc = cli.main(["train-fp", "--config", str(config), "--epochs", "2", "--out", str(root / "fp")])
    assert rc == 0
    return {"root": root, "config": str(config), "manifest": str(manifest), "model": str(root / "fp" / "model.plqsr")}


# acceptance criteria report one line each at the end of the session
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, line = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {line}")
