"""Desk-scale dataset: natural photo tiles plus synthetic fixtures.

Natural images come from the sample photographs bundled with scikit-image, so
building the dataset needs no network access.  Everything is written as PNG
tiles with a JSON manifest (``train`` / ``cal`` / ``eval`` splits); LR images
are synthesised on load by bicubic downsampling.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from plqsr.imaging import (
    SYNTH_KINDS,
    ImageRGB,
    ManifestEntry,
    bicubic_resize,
    read_manifest,
    read_png,
    synth_image,
    write_manifest,
    write_png,
)

NATURAL_SOURCES = ("astronaut", "chelsea", "coffee", "immunohistochemistry", "stereo_motorcycle", "rocket")


def natural_images() -> dict:
    """name -> ImageRGB for the bundled scikit-image photographs."""
    from skimage import data

    out = {}
    for name in NATURAL_SOURCES:
        arr = getattr(data, name)()
        if isinstance(arr, tuple):  # stereo pair: keep the left view
            arr = arr[0]
        out[name] = ImageRGB(np.ascontiguousarray(arr[..., :3], dtype=np.uint8))
    return out


def _tiles(img: ImageRGB, size: int) -> list:
    out = []
    for y in range(0, img.height - size + 1, size):
        for x in range(0, img.width - size + 1, size):
            out.append(ImageRGB(img.pixels[y : y + size, x : x + size]))
    return out


def build_desk_dataset(
    out_dir,
    seed: int = 0,
    tile: int = 96,
    scale: int = 2,
    n_eval_natural: int = 6,
    n_cal: int = 48,
    synth_per_kind: int = 8,
) -> str:
    """Write tiles and ``manifest.json`` under ``out_dir``; return the manifest path.

    Eval gets ``n_eval_natural`` photo tiles plus two colour-wheel fixtures;
    calibration gets ``n_cal`` images (photo tiles and synthetic); everything
    else trains.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    natural = []
    for name, img in natural_images().items():
        natural += [(f"{name}_{i:03d}", t) for i, t in enumerate(_tiles(img, tile))]
    order = rng.permutation(len(natural))
    natural = [natural[i] for i in order]

    synth = []
    for k, kind in enumerate(SYNTH_KINDS):
        for j in range(synth_per_kind):
            s = int(rng.integers(0, 2**31 - 1))
            synth.append((f"{kind}_{j:02d}", synth_image(kind, s, (tile, tile))))

    entries = []

    def put(name, img, split):
        path = os.path.join(out_dir, f"{split}_{name}.png")
        write_png(img, path)
        entries.append(ManifestEntry(hr=path, split=split, factor=scale))

    for name, img in natural[:n_eval_natural]:
        put(name, img, "eval")
    for j in range(2):
        put(f"colorwheel_{j}", synth_image("color-wheel", 10_000 + j, (tile, tile)), "eval")

    n_cal_synth = min(len(synth) // 4, n_cal // 4)
    cal_nat = natural[n_eval_natural : n_eval_natural + n_cal - n_cal_synth]
    for name, img in cal_nat:
        put(name, img, "cal")
    for name, img in synth[:n_cal_synth]:
        put(name, img, "cal")
    for name, img in natural[n_eval_natural + len(cal_nat) :]:
        put(name, img, "train")
    for name, img in synth[n_cal_synth:]:
        put(name, img, "train")

    path = os.path.join(out_dir, "manifest.json")
    write_manifest(entries, path)
    return path


@dataclass
class PairSet:
    lr: np.ndarray  # N x 3 x h x w float32
    hr: np.ndarray  # N x 3 x (h*scale) x (w*scale)
    names: list


def load_pairs(manifest: str, split: str, scale: int) -> list:
    """``[(name, LR ImageRGB, HR ImageRGB)]`` for every entry in ``split``."""
    out = []
    for e in read_manifest(manifest, split):
        lr, hr = e.load_pair(scale)
        out.append((os.path.splitext(os.path.basename(e.hr))[0], lr, hr))
    return out


def training_patches(
    manifest: str,
    scale: int,
    hr_patch: int = 48,
    per_image: int = 4,
    seed: int = 0,
    augment: bool = True,
) -> PairSet:
    """Random HR crops from the train split with bicubic-synthesised LR partners."""
    if hr_patch % scale:
        raise ValueError(f"HR patch {hr_patch} not divisible by scale {scale}")
    rng = np.random.default_rng(seed)
    lrs, hrs, names = [], [], []
    for e in read_manifest(manifest, "train"):
        img = read_png(e.hr)
        for k in range(per_image):
            y = int(rng.integers(0, img.height - hr_patch + 1))
            x = int(rng.integers(0, img.width - hr_patch + 1))
            px = img.pixels[y : y + hr_patch, x : x + hr_patch]
            if augment:
                px = np.rot90(px, int(rng.integers(0, 4)))
                if rng.integers(0, 2):
                    px = px[:, ::-1]
            hr = ImageRGB(np.ascontiguousarray(px))
            lr = bicubic_resize(hr, 1 / scale)
            hrs.append(hr.to_float())
            lrs.append(lr.to_float())
            names.append(f"{os.path.basename(e.hr)}#{k}")
    if not lrs:
        raise ValueError(f"{manifest}: no train entries")
    return PairSet(np.stack(lrs), np.stack(hrs), names)


def calibration_images(manifest: str, scale: int) -> list:
    """LR images of the ``cal`` split (ground truth is never returned)."""
    return [lr for _, lr, _ in load_pairs(manifest, "cal", scale)]


def main(argv: Optional[Sequence[str]] = None) -> int:
    import argparse

    p = argparse.ArgumentParser(prog="python -m plqsr.datasets", description="Write the desk-scale dataset and its manifest.")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=2, choices=(2, 4))
    args = p.parse_args(argv)
    man = build_desk_dataset(args.out_dir, seed=args.seed, scale=args.scale)
    counts = {s: len(read_manifest(man, s)) for s in ("train", "cal", "eval")}
    print(f"{man}: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
