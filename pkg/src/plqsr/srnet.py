"""EDSR-style super-resolution network with named layers and quantizer slots.

Layer names follow the usual EDSR state-dict convention::

    head.0
    body.{k}.conv1, body.{k}.conv2     residual blocks
    body.{B}                           conv closing the body (global skip follows)
    tail.0.{2i}                        upsampler convs, each followed by pixel shuffle x2
    tail.1                             final conv to RGB

Activation quantizers act on conv outputs (before the ReLU inside blocks);
weight quantizers act on each conv's weight tensor with one bound per layer.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from plqsr import tensor as T
from plqsr.optim import Adam
from plqsr.quant import ASYM_ACT, PIECEWISE, SYM_WEIGHT, QuantError, QuantParams, fake_quant

log = logging.getLogger(__name__)

MAGIC = b"PLQSRMDL"
FORMAT_VERSION = 1
FIRST_LAST_POLICIES = ("8bit", "exclude", "same")


class ModelFormatError(ValueError):
    pass


@dataclass
class ConvLayer:
    name: str
    weight: T.Tensor
    bias: T.Tensor
    padding: int = 1

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class ResidualBlock:
    conv1: ConvLayer
    conv2: ConvLayer
    residual_scale: float = 1.0


@dataclass
class QuantAttachment:
    layer_name: str
    weight: Optional[QuantParams] = None
    activation: Optional[QuantParams] = None

    @property
    def bit_width_weights(self) -> Optional[int]:
        return self.weight.b if self.weight else None

    @property
    def bit_width_activations(self) -> Optional[int]:
        return self.activation.b if self.activation else None

    def copy(self) -> "QuantAttachment":
        return QuantAttachment(
            self.layer_name,
            self.weight.copy() if self.weight else None,
            self.activation.copy() if self.activation else None,
        )

    def to_dict(self) -> dict:
        out = {}
        if self.weight:
            out["weight"] = self.weight.to_dict()
        if self.activation:
            out["activation"] = self.activation.to_dict()
        return out


@dataclass
class SrModel:
    scale: int
    head: ConvLayer
    body: list
    body_tail: ConvLayer
    upsampler: list
    tail: ConvLayer
    channels: int
    attachments: dict = field(default_factory=dict)

    @property
    def n_blocks(self) -> int:
        return len(self.body)

    @property
    def residual_scale(self) -> float:
        return self.body[0].residual_scale if self.body else 1.0

    @property
    def layer_registry(self) -> dict:
        """Layer name -> ConvLayer, in execution order."""
        reg = {self.head.name: self.head}
        for blk in self.body:
            reg[blk.conv1.name] = blk.conv1
            reg[blk.conv2.name] = blk.conv2
        reg[self.body_tail.name] = self.body_tail
        for conv in self.upsampler:
            reg[conv.name] = conv
        reg[self.tail.name] = self.tail
        return reg

    @property
    def layer_names(self) -> list:
        return list(self.layer_registry)

    def arch(self) -> dict:
        return {
            "type": "edsr",
            "scale": self.scale,
            "n_blocks": self.n_blocks,
            "channels": self.channels,
            "residual_scale": self.residual_scale,
        }

    def parameters(self) -> list:
        out = []
        for layer in self.layer_registry.values():
            out += [layer.weight, layer.bias]
        return out

    def state_dict(self) -> dict:
        out = {}
        for name, layer in self.layer_registry.items():
            out[f"{name}.weight"] = layer.weight.data
            out[f"{name}.bias"] = layer.bias.data
        return out

    def with_weights(self, state: dict) -> "SrModel":
        """Copy of the model with parameters replaced from ``state``."""
        def conv(layer: ConvLayer) -> ConvLayer:
            w = state.get(f"{layer.name}.weight", layer.weight)
            b = state.get(f"{layer.name}.bias", layer.bias)
            w = w if isinstance(w, T.Tensor) else T.Tensor(w)
            b = b if isinstance(b, T.Tensor) else T.Tensor(b)
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ModelFormatError(f"{layer.name}: parameter shape mismatch")
            return ConvLayer(layer.name, w, b, layer.padding)

        return SrModel(
            scale=self.scale,
            head=conv(self.head),
            body=[ResidualBlock(conv(b.conv1), conv(b.conv2), b.residual_scale) for b in self.body],
            body_tail=conv(self.body_tail),
            upsampler=[conv(c) for c in self.upsampler],
            tail=conv(self.tail),
            channels=self.channels,
            attachments={k: a.copy() for k, a in self.attachments.items()},
        )

    def with_attachments(self, attachments: dict) -> "SrModel":
        """Same weights (shared, immutable) with a different quantizer set."""
        m = self.with_weights({})
        m.attachments = dict(attachments)
        return m

    def quant_params(self) -> dict:
        return {name: att.to_dict() for name, att in self.attachments.items()}


def build_edsr(
    scale: int = 2,
    n_blocks: int = 4,
    channels: int = 16,
    residual_scale: float = 1.0,
    seed: int = 0,
) -> SrModel:
    """Randomly initialised EDSR (PyTorch default conv init, seeded)."""
    if scale not in (2, 4):
        raise ValueError(f"scale must be 2 or 4, got {scale}")
    if n_blocks < 0 or channels < 1:
        raise ValueError("n_blocks must be >= 0 and channels >= 1")
    rng = np.random.default_rng(seed)

    def conv(name, cin, cout, k=3):
        bound = 1.0 / math.sqrt(cin * k * k)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        b = rng.uniform(-bound, bound, size=(cout,)).astype(np.float32)
        return ConvLayer(name, T.Tensor(w), T.Tensor(b), padding=k // 2)

    head = conv("head.0", 3, channels)
    body = [
        ResidualBlock(
            conv(f"body.{k}.conv1", channels, channels),
            conv(f"body.{k}.conv2", channels, channels),
            residual_scale,
        )
        for k in range(n_blocks)
    ]
    body_tail = conv(f"body.{n_blocks}", channels, channels)
    stages = int(round(math.log2(scale)))
    upsampler = [conv(f"tail.0.{2 * i}", channels, 4 * channels) for i in range(stages)]
    tail = conv("tail.1", channels, 3)
    return SrModel(scale, head, body, body_tail, upsampler, tail, channels)


# ---------------------------------------------------------------------------
# quantizer attachment


def attach_quantizers(
    model: SrModel,
    w_bits: int,
    a_bits: int,
    quantizer: str = "plq",
    first_last: str = "8bit",
) -> SrModel:
    """Return a copy of ``model`` with fresh (uninitialised) quantizers on every layer.

    ``quantizer`` is ``plq`` (piecewise activations) or ``uniform`` (asymmetric
    uniform activations).  ``first_last`` chooses what happens to ``head.0`` and
    ``tail.1``: quantize at 8 bits, leave them in full precision, or use the
    same bit widths as the rest.
    """
    if quantizer not in ("plq", "uniform"):
        raise ValueError(f"quantizer must be 'plq' or 'uniform', got {quantizer!r}")
    if first_last not in FIRST_LAST_POLICIES:
        raise ValueError(f"first_last must be one of {FIRST_LAST_POLICIES}, got {first_last!r}")
    kind = PIECEWISE if quantizer == "plq" else ASYM_ACT
    names = model.layer_names
    edge = {names[0], names[-1]}
    atts = {}
    for name in names:
        wb, ab = w_bits, a_bits
        if name in edge:
            if first_last == "exclude":
                continue
            if first_last == "8bit":
                wb, ab = 8, 8
        atts[name] = QuantAttachment(name, QuantParams(SYM_WEIGHT, wb), QuantParams(kind, ab))
    return model.with_attachments(atts)


# ---------------------------------------------------------------------------
# forward


def _check_input(x: T.Tensor) -> None:
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError(f"expected N x 3 x H x W input, got {x.shape}")


def forward(
    model: SrModel,
    x,
    mode: str = "full_precision",
    capture: Optional[Iterable[str]] = None,
    overrides: Optional[dict] = None,
    act_hook: Optional[Callable[[str, T.Tensor], T.Tensor]] = None,
):
    """Run the network.

    Returns ``(output, captured)`` where ``captured`` maps each requested
    layer name to its (post-quantization, post-hook) conv output.
    ``overrides`` maps ``(layer_name, field)`` to scalar tensors replacing the
    stored quantizer parameters; ``act_hook`` may rewrite each conv output.
    """
    if mode not in ("full_precision", "quantized"):
        raise ValueError(f"unknown mode {mode!r}")
    x = x if isinstance(x, T.Tensor) else T.Tensor(x)
    _check_input(x)
    quantized = mode == "quantized"
    if quantized:
        for name, att in model.attachments.items():
            for q in (att.weight, att.activation):
                if q is not None and not q.initialized:
                    raise QuantError(f"layer {name}: quantizer parameters not initialized (calibrate first)")
    want = set(capture or ())
    unknown = want - set(model.layer_names)
    if unknown:
        raise KeyError(f"unknown layer names in capture: {sorted(unknown)}")
    ov = overrides or {}
    captured = {}

    def run(layer: ConvLayer, h: T.Tensor) -> T.Tensor:
        w = layer.weight
        att = model.attachments.get(layer.name) if quantized else None
        if att is not None and att.weight is not None:
            w = fake_quant(w, att.weight, _layer_overrides(ov, layer.name, ("u_w",)))
        y = T.conv2d(h, w, layer.bias, stride=1, padding=layer.padding)
        if att is not None and att.activation is not None:
            y = fake_quant(y, att.activation, _layer_overrides(ov, layer.name, ("l_a", "u_a", "bp")))
        if act_hook is not None:
            y = act_hook(layer.name, y)
        if layer.name in want:
            captured[layer.name] = y
        return y

    h = run(model.head, x)
    r = h
    for blk in model.body:
        t = T.relu(run(blk.conv1, r))
        t = run(blk.conv2, t)
        if blk.residual_scale != 1.0:
            t = T.scalar_mul(t, blk.residual_scale)
        r = T.add(r, t)
    r = T.add(run(model.body_tail, r), h)
    for conv in model.upsampler:
        r = T.pixel_shuffle(run(conv, r), 2)
    out = run(model.tail, r)
    return out, captured


def _layer_overrides(ov: dict, name: str, keys: tuple) -> dict:
    return {k: ov[(name, k)] for k in keys if (name, k) in ov}


def predict(model: SrModel, x, mode: str = "full_precision", batch_size: int = 8) -> np.ndarray:
    """Forward without a tape, batching over the first axis; returns a float32 array."""
    arr = x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float32)
    outs = []
    for i in range(0, arr.shape[0], batch_size):
        out, _ = forward(model, T.Tensor(arr[i : i + batch_size]), mode)
        outs.append(out.data)
    return np.concatenate(outs, axis=0)


def op_counts(model: SrModel, lr_h: int, lr_w: int) -> dict:
    """Multiply-accumulate count per conv layer for one ``lr_h x lr_w`` input."""
    counts = {}
    h, w = lr_h, lr_w
    for name, layer in model.layer_registry.items():
        cout, cin, kh, kw = layer.weight.shape
        counts[name] = int(cout * cin * kh * kw * h * w)
        if name.startswith("tail.0."):
            h, w = 2 * h, 2 * w
    return counts


# ---------------------------------------------------------------------------
# training of the full-precision network


def train_fp(
    model: SrModel,
    lr_patches: np.ndarray,
    hr_patches: np.ndarray,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    progress: Optional[Callable[[int, float], None]] = None,
):
    """Adam on the L1 reconstruction loss over ``(LR, HR)`` patch pairs.

    Returns ``(trained_model, per_step_losses)``.  Quantizer attachments are
    carried over untouched.
    """
    lr_patches = np.asarray(lr_patches, dtype=np.float32)
    hr_patches = np.asarray(hr_patches, dtype=np.float32)
    if lr_patches.shape[0] != hr_patches.shape[0]:
        raise ValueError("LR and HR patch counts differ")
    if lr_patches.ndim != 4 or hr_patches.ndim != 4:
        raise ValueError("patches must be N x 3 x H x W")
    if (
        hr_patches.shape[2] != lr_patches.shape[2] * model.scale
        or hr_patches.shape[3] != lr_patches.shape[3] * model.scale
    ):
        raise ValueError(
            f"scale mismatch: model x{model.scale}, LR {lr_patches.shape[2:]} vs HR {hr_patches.shape[2:]}"
        )
    if epochs <= 0:
        return model, []

    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr)
    state = {k: v.astype(np.float32) for k, v in model.state_dict().items()}
    losses = []
    n = lr_patches.shape[0]
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            params = {k: T.Tensor(v, requires_grad=True) for k, v in state.items()}
            cur = model.with_weights(params)
            with T.GradTape() as tape:
                out, _ = forward(cur, T.Tensor(lr_patches[idx]))
                loss = T.l1_diff(out, T.Tensor(hr_patches[idx]))
            grads = T.backward(tape, loss)
            for k, t in params.items():
                g = grads.get(t)
                if g is not None:
                    state[k] = opt.step(k, state[k], g.data).astype(np.float32)
            losses.append(loss.item())
            step += 1
            if progress is not None:
                progress(step, losses[-1])
    return model.with_weights(state), losses


# ---------------------------------------------------------------------------
# serialization


def _manifest(model: SrModel) -> dict:
    return {
        "format": "plqsr-model",
        "version": FORMAT_VERSION,
        "arch": model.arch(),
        "layers": model.layer_names,
        "quant": model.quant_params(),
    }


def save_model(model: SrModel, path) -> None:
    """Write magic, u32 manifest length, JSON manifest, then raw little-endian float32 arrays."""
    manifest = _manifest(model)
    blobs = []
    offset = 0
    entries = []
    for name, arr in model.state_dict().items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest["params"] = entries
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_model(path) -> SrModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: not a plqsr model file (bad magic)")
    (hlen,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        manifest = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt manifest ({exc})") from None
    blob = data[start + hlen :]

    def read(entry):
        lo, nb = entry["offset"], entry["nbytes"]
        if lo < 0 or lo + nb > len(blob):
            raise ModelFormatError(f"{path}: parameter {entry['name']} runs past end of file")
        return np.frombuffer(blob[lo : lo + nb], dtype="<f4")

    return _from_manifest(manifest, read, str(path))


def _from_manifest(manifest: dict, read: Callable[[dict], np.ndarray], where: str) -> SrModel:
    if manifest.get("format") != "plqsr-model":
        raise ModelFormatError(f"{where}: unknown format {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"{where}: format version {manifest.get('version')} (expected {FORMAT_VERSION})"
        )
    arch = manifest["arch"]
    if arch.get("type") != "edsr":
        raise ModelFormatError(f"{where}: unsupported architecture {arch.get('type')!r}")
    model = build_edsr(
        scale=int(arch["scale"]),
        n_blocks=int(arch["n_blocks"]),
        channels=int(arch["channels"]),
        residual_scale=float(arch.get("residual_scale", 1.0)),
    )
    if manifest.get("layers") != model.layer_names:
        raise ModelFormatError(f"{where}: layer list does not match architecture")
    expected = {k: v.shape for k, v in model.state_dict().items()}
    state = {}
    for entry in manifest["params"]:
        name = entry["name"]
        if name not in expected:
            raise ModelFormatError(f"{where}: unexpected parameter {name}")
        arr = read(entry)
        shape = tuple(entry["shape"])
        if shape != expected[name] or arr.size != int(np.prod(shape)):
            raise ModelFormatError(f"{where}: parameter {name} has wrong size/shape")
        state[name] = arr.astype(np.float32).reshape(shape)
    missing = set(expected) - set(state)
    if missing:
        raise ModelFormatError(f"{where}: missing parameters {sorted(missing)}")
    model = model.with_weights(state)
    atts = {}
    for name, q in manifest.get("quant", {}).items():
        if name not in expected and f"{name}.weight" not in expected:
            raise ModelFormatError(f"{where}: quantizer for unknown layer {name}")
        atts[name] = QuantAttachment(
            name,
            QuantParams.from_dict(q["weight"]) if "weight" in q else None,
            QuantParams.from_dict(q["activation"]) if "activation" in q else None,
        )
    model.attachments = atts
    return model


def export_model(model: SrModel, directory) -> None:
    """Write ``manifest.json`` plus one raw ``<param>.bin`` file per parameter."""
    os.makedirs(directory, exist_ok=True)
    manifest = _manifest(model)
    entries = []
    for name, arr in model.state_dict().items():
        fname = f"{name}.bin"
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        with open(os.path.join(directory, fname), "wb") as fh:
            fh.write(raw)
        entries.append({"name": name, "shape": list(arr.shape), "file": fname, "offset": 0, "nbytes": len(raw)})
    manifest["params"] = entries
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def import_model(directory) -> SrModel:
    """Load weights exported by external scripts in the ``export_model`` layout."""
    mpath = os.path.join(directory, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{mpath}: corrupt manifest ({exc})") from None

    def read(entry):
        with open(os.path.join(directory, entry["file"]), "rb") as fh:
            return np.frombuffer(fh.read(), dtype="<f4")

    return _from_manifest(manifest, read, mpath)
