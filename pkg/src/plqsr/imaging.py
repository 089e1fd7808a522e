"""Images in and out, LR synthesis, and Y-channel quality metrics.

Images are 8-bit RGB (:class:`ImageRGB`).  Model outputs are float RGB in
``[0, 1]``; metric functions accept either and work in floating point on the
``[0, 255]`` scale without re-quantizing.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from plqsr.tensor import Tensor

PSNR_INF = float("inf")
SYNTH_KINDS = ("ramp", "checker", "color-wheel", "gaussian-noise")
RESIZE_FACTORS = (0.25, 0.5, 1, 2, 4)


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRGB:
    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ImageError(f"expected H x W x 3 samples, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ImageError(f"expected uint8 samples, got {px.dtype}")
        px = np.ascontiguousarray(px)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def to_float(self) -> np.ndarray:
        """(3, H, W) float32 in [0, 1]."""
        return (self.pixels.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()

    @classmethod
    def from_float(cls, chw: np.ndarray) -> "ImageRGB":
        """Clip a (3, H, W) float image in [0, 1] and round to 8 bits."""
        arr = np.clip(np.asarray(chw, dtype=np.float64), 0.0, 1.0) * 255.0
        return cls(np.floor(arr + 0.5).astype(np.uint8).transpose(1, 2, 0))


ImageLike = Union[ImageRGB, np.ndarray]


# ---------------------------------------------------------------------------
# PNG


def read_png(path) -> ImageRGB:
    with Image.open(path) as im:
        return ImageRGB(np.asarray(im.convert("RGB"), dtype=np.uint8))


def write_png(img: ImageRGB, path) -> None:
    Image.fromarray(np.asarray(img.pixels), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# colour


def _rgb255(img: ImageLike) -> np.ndarray:
    """Float64 (H, W, 3) on the [0, 255] scale.

    Accepts an ImageRGB, an (H, W, 3) array already on [0, 255], or a
    (3, H, W) float array on [0, 1] (model output layout).
    """
    if isinstance(img, ImageRGB):
        return img.pixels.astype(np.float64)
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[2] != 3:
        return np.clip(arr.astype(np.float64), 0.0, 1.0).transpose(1, 2, 0) * 255.0
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr.astype(np.float64)
    raise ImageError(f"cannot interpret array of shape {arr.shape} as an RGB image")


def _luma(rgb: np.ndarray) -> np.ndarray:
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def to_y_channel(img: ImageLike) -> Tensor:
    """BT.601 luma on [0, 255] as a (1, 1, H, W) float64 tensor."""
    y = _luma(_rgb255(img))
    return Tensor(y[None, None])


def rgb_to_ycbcr(img: ImageLike) -> np.ndarray:
    """Full-range BT.601 YCbCr, (H, W, 3) float64, chroma centred on 128."""
    rgb = _rgb255(img)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = _luma(rgb)
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def _y_plane(img: ImageLike, crop: int) -> np.ndarray:
    y = _luma(_rgb255(img))
    if crop:
        if y.shape[0] <= 2 * crop or y.shape[1] <= 2 * crop:
            raise ImageError(f"border crop {crop} leaves no pixels of a {y.shape} image")
        y = y[crop:-crop, crop:-crop]
    return y


# ---------------------------------------------------------------------------
# metrics


def psnr_y(a: ImageLike, b: ImageLike, crop: int = 0) -> float:
    """Y-channel PSNR in dB (peak 255); ``inf`` for identical inputs."""
    ya, yb = _y_plane(a, crop), _y_plane(b, crop)
    if ya.shape != yb.shape:
        raise ImageError(f"psnr_y: dimension mismatch {ya.shape} vs {yb.shape}")
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(255.0**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_y(a: ImageLike, b: ImageLike, crop: int = 0) -> float:
    """Mean SSIM on Y: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, L=255."""
    ya, yb = _y_plane(a, crop), _y_plane(b, crop)
    if ya.shape != yb.shape:
        raise ImageError(f"ssim_y: dimension mismatch {ya.shape} vs {yb.shape}")
    if ya.shape[0] < 11 or ya.shape[1] < 11:
        raise ImageError(f"ssim_y: image {ya.shape} smaller than the 11x11 window")
    g = gaussian_window()
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    mu_a = _filter_valid(ya, g)
    mu_b = _filter_valid(yb, g)
    var_a = _filter_valid(ya * ya, g) - mu_a * mu_a
    var_b = _filter_valid(yb * yb, g) - mu_b * mu_b
    cov = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def chroma_mean(img: ImageLike) -> tuple[float, float]:
    ycc = rgb_to_ycbcr(img)
    return float(ycc[..., 1].mean()), float(ycc[..., 2].mean())


# ---------------------------------------------------------------------------
# resampling


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def resize_weights(n_in: int, n_out: int, factor: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-pixel source indices and normalised weights along one axis.

    Pixel centres map as ``src = (dst + 0.5) / factor - 0.5``.  When
    shrinking, the kernel is stretched by ``1 / factor`` (antialiasing).
    Indices outside the image are clamped to the edge.
    """
    scale = min(factor, 1.0)
    support = 2.0 / scale
    centers = (np.arange(n_out) + 0.5) / factor - 0.5
    first = np.floor(centers - support).astype(np.int64) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((centers[:, None] - idx) * scale)
    w = w / w.sum(axis=1, keepdims=True)
    return np.clip(idx, 0, n_in - 1), w


def resize_array(hwc: np.ndarray, factor: float) -> np.ndarray:
    """Separable Catmull-Rom (a = -0.5) resize of a float (H, W, C) array."""
    h, w = hwc.shape[:2]
    oh, ow = int(round(h * factor)), int(round(w * factor))
    if oh < 1 or ow < 1:
        raise ImageError(f"resize by {factor} of {h}x{w} is degenerate")
    ri, rw = resize_weights(h, oh, factor)
    ci, cw = resize_weights(w, ow, factor)
    arr = np.asarray(hwc, dtype=np.float64)
    tmp = np.einsum("ot,otwc->owc", rw, arr[ri])
    return np.einsum("pt,optc->opc", cw, tmp[:, ci])


def bicubic_resize(img: ImageRGB, factor: float) -> ImageRGB:
    if factor not in RESIZE_FACTORS:
        raise ImageError(f"resize factor must be one of {RESIZE_FACTORS}, got {factor}")
    if factor == 1:
        return img
    h, w = img.height, img.width
    if (h * factor) != int(h * factor) or (w * factor) != int(w * factor):
        raise ImageError(f"{h}x{w} is not divisible for factor {factor}")
    out = resize_array(img.pixels.astype(np.float64), factor)
    return ImageRGB(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def crop_patches(img: ImageRGB, size: int, seed: int, count: int = 1) -> list:
    """``count`` random ``size x size`` crops, positions drawn from ``seed``."""
    if size < 1 or size > img.height or size > img.width:
        raise ImageError(f"patch size {size} does not fit a {img.height}x{img.width} image")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        y = int(rng.integers(0, img.height - size + 1))
        x = int(rng.integers(0, img.width - size + 1))
        out.append(ImageRGB(img.pixels[y : y + size, x : x + size]))
    return out


def center_crop(img: ImageRGB, size: int) -> ImageRGB:
    if size > img.height or size > img.width:
        raise ImageError(f"crop {size} larger than image {img.height}x{img.width}")
    y = (img.height - size) // 2
    x = (img.width - size) // 2
    return ImageRGB(img.pixels[y : y + size, x : x + size])


# ---------------------------------------------------------------------------
# synthetic fixtures


def synth_image(kind: str, seed: int, dims: Sequence[int] = (64, 64), **opts) -> ImageRGB:
    """Deterministic synthetic test image.

    ramp: horizontal blend between two random colours.
    checker: two random colours alternating every ``period`` pixels.
    color-wheel: hue by angle, saturation by radius, full value.
    gaussian-noise: i.i.d. samples, ``mean``/``sigma`` (defaults 128/20).
    """
    h, w = int(dims[0]), int(dims[1])
    if h < 1 or w < 1:
        raise ImageError(f"bad dims {dims}")
    rng = np.random.default_rng(seed)
    if kind == "ramp":
        c0 = rng.uniform(0, 255, 3) if opts.get("color", True) else np.zeros(3)
        c1 = rng.uniform(0, 255, 3) if opts.get("color", True) else np.full(3, 255.0)
        t = np.linspace(0.0, 1.0, w)[None, :, None]
        img = np.broadcast_to(c0 + (c1 - c0) * t, (h, w, 3))
    elif kind == "checker":
        period = int(opts.get("period", 2 + int(rng.integers(0, 7))))
        c0 = rng.integers(0, 256, 3)
        c1 = rng.integers(0, 256, 3)
        while np.array_equal(c0, c1):
            c1 = rng.integers(0, 256, 3)
        yy, xx = np.mgrid[0:h, 0:w]
        mask = ((yy // period + xx // period) % 2).astype(bool)
        img = np.where(mask[..., None], c1, c0)
    elif kind == "color-wheel":
        rot = rng.uniform(0, 1)
        cy = (h - 1) / 2 + rng.uniform(-0.1, 0.1) * h
        cx = (w - 1) / 2 + rng.uniform(-0.1, 0.1) * w
        yy, xx = np.mgrid[0:h, 0:w]
        hue = (np.arctan2(yy - cy, xx - cx) / (2 * np.pi) + rot) % 1.0
        rad = np.hypot(yy - cy, xx - cx)
        sat = np.clip(rad / max(rad.max(), 1e-9) * 1.2, 0.0, 1.0)
        rgb = np.vectorize(colorsys.hsv_to_rgb)(hue, sat, np.ones_like(hue))
        img = np.stack(rgb, axis=-1) * 255.0
    elif kind == "gaussian-noise":
        mean = float(opts.get("mean", 128.0))
        sigma = float(opts.get("sigma", 20.0))
        img = rng.normal(mean, sigma, (h, w, 3))
    else:
        raise ImageError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    return ImageRGB(np.clip(np.floor(np.asarray(img, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class ManifestEntry:
    hr: str
    split: str
    lr: str | None = None
    factor: int | None = None

    def load_pair(self, scale: int) -> tuple[ImageRGB, ImageRGB]:
        """(LR, HR) images; LR synthesised by bicubic downsampling when absent."""
        hr = read_png(self.hr)
        if self.lr:
            lr = read_png(self.lr)
        else:
            f = self.factor or scale
            if f != scale:
                raise ImageError(f"{self.hr}: manifest factor {f} != model scale {scale}")
            h, w = (hr.height // f) * f, (hr.width // f) * f
            hr = ImageRGB(hr.pixels[:h, :w])
            lr = bicubic_resize(hr, 1 / f)
        if lr.height * scale != hr.height or lr.width * scale != hr.width:
            raise ImageError(f"{self.hr}: LR {lr.height}x{lr.width} x{scale} != HR {hr.height}x{hr.width}")
        return lr, hr


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    for e in entries:
        row = {"hr": os.path.relpath(e.hr, base), "split": e.split}
        if e.lr:
            row["lr"] = os.path.relpath(e.lr, base)
        if e.factor:
            row["factor"] = e.factor
        rows.append(row)
    with open(path, "w") as fh:
        json.dump({"version": 1, "entries": rows}, fh, indent=1)


def read_manifest(path, split: str | None = None) -> list:
    """Entries of a dataset manifest, paths resolved against the manifest's directory."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "entries" not in doc:
        raise ImageError(f"{path}: not a dataset manifest")
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for row in doc["entries"]:
        if "hr" not in row or "split" not in row:
            raise ImageError(f"{path}: entry missing 'hr' or 'split': {row}")
        e = ManifestEntry(
            hr=os.path.join(base, row["hr"]),
            split=row["split"],
            lr=os.path.join(base, row["lr"]) if row.get("lr") else None,
            factor=row.get("factor"),
        )
        if split is None or e.split == split:
            out.append(e)
    return out
