"""Command-line experiment harness.

Every command writes a self-contained output directory holding the effective
config (``config.json``), a ``report.json`` and CSV tables.  Re-running a
command with the same config and seed reproduces ``report.json`` byte for
byte apart from the ``wall_clock_s`` field.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import math
import os
import sys
import time
from typing import Optional

import numpy as np

import plqsr
from plqsr import baselines, datasets, kernels, srnet
from plqsr import tensor as T
from plqsr.calibrate import CalibrationError, CalibrationSet, calibrate, sensitivity_profile
from plqsr.finetune import FinetuneConfig, finetune
from plqsr.imaging import ImageError, ImageRGB, write_png
from plqsr.quant import QuantError

log = logging.getLogger("plqsr")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_NUMERIC = 5

COMMANDS = (
    "train-fp",
    "calibrate",
    "finetune",
    "evaluate",
    "sweep",
    "ablation",
    "clip-experiment",
    "quantize-all",
)

# flat dotted keys; CLI flags map onto the undotted ones
DEFAULTS = {
    "manifest": None,
    "model": None,
    "out": None,
    "bits": "4,4",
    "quantizer": "plq",
    "baseline": "minmax",
    "first_last": "8bit",
    "seed": 0,
    "epochs": None,  # per-command default below
    "lambda": 5.0,
    "beta": 0.9,
    "lr": None,  # per-command default below
    "dump_activations": False,
    "arch.scale": 2,
    "arch.blocks": 4,
    "arch.channels": 16,
    "arch.residual_scale": 1.0,
    "train.batch_size": 16,
    "train.hr_patch": 48,
    "train.per_image": 4,
    "train.augment": True,
    "calib.bp_percentile": 99.0,
    "calib.patch": 48,
    "calib.batch_size": 16,
    "finetune.batch_size": 2,
    "finetune.lr_decay": 0.9,
    "baseline.p": 99.0,
    "baseline.grid": 32,
    "clip.fraction": 0.01,
    "eval.crop": None,  # None -> model scale
    "eval.save_images": True,
    "evaluate.reference_model": None,
}
EPOCH_DEFAULTS = {"train-fp": 300}
LR_DEFAULTS = {"train-fp": 1e-3}
SEED_STREAMS = ("init", "sampler", "crop", "calib", "finetune")

EPILOG = f"""\
exit codes:
  {EXIT_OK}  success
  {EXIT_USAGE}  usage error (bad or unknown flag)
  {EXIT_MISSING}  a referenced file does not exist
  {EXIT_CONFIG}  invalid configuration or input file
  {EXIT_NUMERIC}  numeric failure (non-finite loss or activation)
  {EXIT_OTHER}  any other error

environment:
  PLQ_THREADS   cap on BLAS / OpenMP worker threads
  PLQSR_KERNELS set to "python" to force the NumPy kernel backend
"""


class ConfigError(ValueError):
    pass


class MissingFileError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _parse_bits(v) -> tuple:
    try:
        w, a = (int(s) for s in str(v).split(","))
    except ValueError:
        raise ConfigError(f"--bits expects W,A (e.g. 4,4), got {v!r}") from None
    if w < 2 or a < 2:
        raise ConfigError(f"bit widths must be >= 2, got {w},{a}")
    return w, a


def load_config(path) -> dict:
    if not os.path.exists(path):
        raise MissingFileError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected a JSON object of dotted keys")
    unknown = set(cfg) - set(DEFAULTS) - {"command"}
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return cfg


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        file_cfg = load_config(args.config)
        if file_cfg.get("command", command) != command:
            raise ConfigError(f"config is for command {file_cfg['command']!r}, not {command!r}")
        cfg.update({k: v for k, v in file_cfg.items() if k != "command"})
    for key in DEFAULTS:
        if "." in key:
            continue
        v = getattr(args, key, None)
        if v is not None and v is not False:
            cfg[key] = v
    if cfg["epochs"] is None:
        cfg["epochs"] = EPOCH_DEFAULTS.get(command, 10)
    if cfg["lr"] is None:
        cfg["lr"] = LR_DEFAULTS.get(command, 1e-3)
    cfg["command"] = command
    validate_config(cfg)
    return dict(sorted(cfg.items()))


def validate_config(cfg: dict) -> None:
    _parse_bits(cfg["bits"])
    choices = {
        "quantizer": ("plq", "uniform"),
        "baseline": baselines.BASELINE_KINDS,
        "first_last": srnet.FIRST_LAST_POLICIES,
    }
    for key, allowed in choices.items():
        if cfg[key] not in allowed:
            raise ConfigError(f"{key} must be one of {tuple(allowed)}, got {cfg[key]!r}")
    if int(cfg["epochs"]) < 0:
        raise ConfigError("epochs must be >= 0")
    if not float(cfg["lr"]) >= 0:
        raise ConfigError("lr must be >= 0")
    if not float(cfg["lambda"]) >= 0:
        raise ConfigError("lambda must be >= 0")
    if not 0 <= float(cfg["beta"]) <= 1:
        raise ConfigError("beta must be in [0, 1]")
    if int(cfg["arch.scale"]) not in (2, 4):
        raise ConfigError("arch.scale must be 2 or 4")
    if not 0 < float(cfg["clip.fraction"]) < 1:
        raise ConfigError("clip.fraction must be in (0, 1)")


def seed_streams(root: int) -> dict:
    """Fan the root seed out to named sub-seeds (fixed spawn order)."""
    children = np.random.SeedSequence(int(root)).spawn(len(SEED_STREAMS))
    return {name: int(c.generate_state(1)[0]) for name, c in zip(SEED_STREAMS, children)}


def source_version() -> dict:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = os.path.dirname(plqsr.__file__)
    for fname in sorted(os.listdir(root)):
        if fname.endswith((".py", ".pyx")):
            with open(os.path.join(root, fname), "rb") as fh:
                h.update(fname.encode() + b"\0" + fh.read())
    return {"package": plqsr.__version__, "source_sha256": h.hexdigest()[:16]}


# ---------------------------------------------------------------------------
# run context


def _json_safe(obj):
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, (np.floating, np.integer)):
        return _json_safe(obj.item())
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


class Run:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = cfg["out"]
        if not self.out:
            raise ConfigError("--out is required")
        os.makedirs(self.out, exist_ok=True)
        self.seeds = seed_streams(cfg["seed"])
        self.report = {
            "command": cfg["command"],
            "config": cfg,
            "seeds": {"root": int(cfg["seed"]), **self.seeds},
            "version": source_version(),
            "backend": kernels.BACKEND,
        }
        self.t0 = time.perf_counter()
        dump_json(cfg, self.path("config.json"))

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    def write_text(self, name: str, text: str) -> None:
        with open(self.path(name), "w") as fh:
            fh.write(text)

    def finish(self) -> None:
        self.report["wall_clock_s"] = round(time.perf_counter() - self.t0, 3)
        dump_json(self.report, self.path("report.json"))


def _need_file(path, what: str) -> str:
    if not path:
        raise ConfigError(f"--{what} is required for this command")
    if not os.path.exists(path):
        raise MissingFileError(f"{what} not found: {path}")
    return path


def _load_model(cfg) -> srnet.SrModel:
    return srnet.load_model(_need_file(cfg["model"], "model"))


def _cal_set(cfg, scale: int) -> CalibrationSet:
    man = _need_file(cfg["manifest"], "manifest")
    imgs = datasets.calibration_images(man, scale)
    if not imgs:
        raise ConfigError(f"{man}: no 'cal' entries")
    return CalibrationSet.from_images(
        imgs, batch_size=int(cfg["calib.batch_size"]), patch_size=int(cfg["calib.patch"]), source=man
    )


def _eval_pairs(cfg, scale: int) -> list:
    man = _need_file(cfg["manifest"], "manifest")
    pairs = datasets.load_pairs(man, "eval", scale)
    if not pairs:
        raise ConfigError(f"{man}: no 'eval' entries")
    return pairs


def _crop(cfg):
    return None if cfg["eval.crop"] is None else int(cfg["eval.crop"])


def _ft_config(cfg, seed: int) -> FinetuneConfig:
    return FinetuneConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["finetune.batch_size"]),
        lr=float(cfg["lr"]),
        lr_decay=float(cfg["finetune.lr_decay"]),
        lam=float(cfg["lambda"]),
        seed=seed,
    )


def _attach(model, cfg):
    w, a = _parse_bits(cfg["bits"])
    return srnet.attach_quantizers(model.with_attachments({}), w, a, cfg["quantizer"], cfg["first_last"])


def _calibrate(run: Run, model, cal_set):
    """Calibrate with PLQ or, for uniform quantizers, the configured baseline."""
    cfg = run.cfg
    model = _attach(model, cfg)
    if cfg["quantizer"] == "plq":
        model, profile, rep = calibrate(model, cal_set, float(cfg["beta"]), float(cfg["calib.bp_percentile"]))
    else:
        spec = baselines.BaselineSpec(cfg["baseline"], float(cfg["baseline.p"]), int(cfg["baseline.grid"]))
        model, rep = baselines.calibrate_baseline(model, cal_set, spec, float(cfg["beta"]))
        profile = sensitivity_profile(model, cal_set)
        rep["sensitivity"] = profile.to_dict()
    rep["cal_set"] = cal_set.manifest()
    run.report["calibration"] = rep
    run.write_text(
        "sensitivity.csv",
        baselines.rows_to_csv([{"layer": k, "s": v} for k, v in profile.s.items()], ("layer", "s")),
    )
    if cfg["dump_activations"]:
        _dump_activations(run, model, cal_set)
    return model, profile


def _dump_activations(run: Run, model, cal_set) -> None:
    """Full-precision activations of the first calibration batch, one .npy per layer."""
    os.makedirs(run.path("activations"), exist_ok=True)
    names = model.layer_names
    _, feats = srnet.forward(model, T.Tensor(cal_set.batches[0]), "full_precision", capture=names)
    rows = []
    for name in names:
        a = feats[name].data
        np.save(run.path("activations", f"{name}.npy"), a)
        rows.append(
            {
                "layer": name,
                "min": float(a.min()),
                "max": float(a.max()),
                "mean": float(a.mean()),
                "std": float(a.std()),
                "p99_abs": float(np.sort(np.abs(a), axis=None)[math.ceil(0.99 * a.size) - 1]),
            }
        )
    run.write_text("activations.csv", baselines.rows_to_csv(rows, ("layer", "min", "max", "mean", "std", "p99_abs")))


def _finetune(run: Run, model, cal_set, profile):
    hist_path = run.path("finetune_log.jsonl")
    model, hist = finetune(model, cal_set, profile, _ft_config(run.cfg, run.seeds["finetune"]), log_path=hist_path)
    run.report["finetune"] = hist
    run.write_text(
        "loss_curve.csv",
        baselines.rows_to_csv(hist["epochs"], ("epoch", "stage", "lr", "L_rec", "L_sen", "L_all")),
    )
    return model


def _evaluate_into(run: Run, model, pairs, mode, prefix="") -> dict:
    rows, outputs = baselines.evaluate_model(model, pairs, mode, _crop(run.cfg))
    run.write_text(f"{prefix}metrics.csv", baselines.rows_to_csv(rows, ("image", "psnr", "ssim")))
    mean = baselines.mean_metrics(rows)
    run.report[f"{prefix}metrics"] = {"per_image": rows, "mean": mean}
    return mean


def _ops(model, cal_set=None) -> dict:
    side = cal_set.patch_size if cal_set is not None else 48
    counts = srnet.op_counts(model, side, side)
    return {"input": [side, side], "macs": counts, "total_macs": int(sum(counts.values()))}


# ---------------------------------------------------------------------------
# commands


def cmd_train_fp(run: Run) -> None:
    cfg = run.cfg
    man = _need_file(cfg["manifest"], "manifest")
    scale = int(cfg["arch.scale"])
    model = srnet.build_edsr(
        scale,
        int(cfg["arch.blocks"]),
        int(cfg["arch.channels"]),
        float(cfg["arch.residual_scale"]),
        seed=run.seeds["init"],
    )
    patches = datasets.training_patches(
        man,
        scale,
        int(cfg["train.hr_patch"]),
        int(cfg["train.per_image"]),
        seed=run.seeds["crop"],
        augment=bool(cfg["train.augment"]),
    )
    model, losses = srnet.train_fp(
        model,
        patches.lr,
        patches.hr,
        int(cfg["epochs"]),
        float(cfg["lr"]),
        int(cfg["train.batch_size"]),
        seed=run.seeds["sampler"],
    )
    srnet.save_model(model, run.path("model.plqsr"))
    run.write_text(
        "loss_curve.csv",
        baselines.rows_to_csv([{"step": i + 1, "loss": v} for i, v in enumerate(losses)], ("step", "loss")),
    )
    run.report["train"] = {
        "patches": int(patches.lr.shape[0]),
        "steps": len(losses),
        "first_loss": losses[0] if losses else None,
        "last_loss": losses[-1] if losses else None,
    }
    run.report["ops"] = _ops(model)
    if datasets.read_manifest(man, "eval"):
        _evaluate_into(run, model, _eval_pairs(cfg, scale), "full_precision")


def cmd_calibrate(run: Run) -> None:
    model = _load_model(run.cfg)
    cal_set = _cal_set(run.cfg, model.scale)
    model, _ = _calibrate(run, model, cal_set)
    srnet.save_model(model, run.path("model.plqsr"))
    run.report["ops"] = _ops(model, cal_set)


def cmd_finetune(run: Run) -> None:
    model = _load_model(run.cfg)
    if not model.attachments:
        raise ConfigError("finetune needs a calibrated model (run calibrate first)")
    cal_set = _cal_set(run.cfg, model.scale)
    profile = sensitivity_profile(model, cal_set)
    model = _finetune(run, model, cal_set, profile)
    srnet.save_model(model, run.path("model.plqsr"))


def cmd_quantize_all(run: Run) -> None:
    model = _load_model(run.cfg)
    cal_set = _cal_set(run.cfg, model.scale)
    model, profile = _calibrate(run, model, cal_set)
    model = _finetune(run, model, cal_set, profile)
    srnet.save_model(model, run.path("model.plqsr"))
    run.report["ops"] = _ops(model, cal_set)
    if run.cfg["manifest"] and datasets.read_manifest(run.cfg["manifest"], "eval"):
        _evaluate_into(run, model, _eval_pairs(run.cfg, model.scale), "quantized")


def cmd_evaluate(run: Run) -> None:
    cfg = run.cfg
    model = _load_model(cfg)
    pairs = _eval_pairs(cfg, model.scale)
    mode = "quantized" if model.attachments else "full_precision"
    ref_path = cfg["evaluate.reference_model"]
    if ref_path:
        # score against another model's float outputs instead of HR
        ref = srnet.load_model(_need_file(ref_path, "reference model"))
        ref_mode = "quantized" if ref.attachments else "full_precision"
        pairs = [(n, lr, srnet.predict(ref, lr.to_float()[None], ref_mode)[0]) for n, lr, _ in pairs]
    run.report["mode"] = mode
    rows, outputs = baselines.evaluate_model(model, pairs, mode, _crop(cfg))
    run.write_text("metrics.csv", baselines.rows_to_csv(rows, ("image", "psnr", "ssim")))
    run.report["metrics"] = {"per_image": rows, "mean": baselines.mean_metrics(rows)}
    if cfg["eval.save_images"]:
        os.makedirs(run.path("images"), exist_ok=True)
        for (name, _, _), out in zip(pairs, outputs):
            write_png(ImageRGB.from_float(out), run.path("images", f"{name}.png"))
    print(baselines.text_table(rows, ("image", "psnr", "ssim")), end="")


def cmd_sweep(run: Run) -> None:
    cfg = run.cfg
    model = _load_model(cfg)
    _, a_bits = _parse_bits(cfg["bits"])
    res = baselines.layer_sweep(
        model, _eval_pairs(cfg, model.scale), _cal_set(cfg, model.scale), a_bits, crop=_crop(cfg)
    )
    run.report["sweep"] = res.to_dict()
    run.write_text("sweep.csv", res.to_csv())
    print(baselines.text_table(res.records, ("layer", "psnr", "drop")), end="")
    print(f"full precision {res.fp_psnr:.4f} dB, spread {res.spread:.4f} dB")


def cmd_ablation(run: Run) -> None:
    cfg = run.cfg
    model = _load_model(cfg)
    w, a = _parse_bits(cfg["bits"])
    res = baselines.ablation_grid(
        model,
        _cal_set(cfg, model.scale),
        _eval_pairs(cfg, model.scale),
        w,
        a,
        _ft_config(cfg, run.seeds["finetune"]),
        cfg["first_last"],
        float(cfg["beta"]),
        _crop(cfg),
    )
    run.report["ablation"] = res.to_dict()
    run.write_text("ablation.csv", res.to_csv())
    print(baselines.text_table(res.rows, ("variant", "psnr", "ssim")), end="")


def cmd_clip_experiment(run: Run) -> None:
    cfg = run.cfg
    model = _load_model(cfg)
    res = baselines.clip_experiment(model, _eval_pairs(cfg, model.scale), float(cfg["clip.fraction"]), _crop(cfg))
    cols = ("image", "psnr_plain", "psnr_clipped", "psnr_drop", "psnr_vs_plain", "cb_plain", "cr_plain", "cb_clipped", "cr_clipped", "chroma_shift")
    run.report["clip"] = {"fraction": res["fraction"], "rows": res["rows"]}
    run.write_text("clip.csv", baselines.rows_to_csv(res["rows"], cols))
    if cfg["eval.save_images"]:
        os.makedirs(run.path("images"), exist_ok=True)
        for row, (plain, clipped) in zip(res["rows"], res["outputs"]):
            write_png(ImageRGB.from_float(plain), run.path("images", f"{row['image']}_plain.png"))
            write_png(ImageRGB.from_float(clipped), run.path("images", f"{row['image']}_clipped.png"))
    print(baselines.text_table(res["rows"], ("image", "psnr_drop", "chroma_shift")), end="")


HANDLERS = {
    "train-fp": cmd_train_fp,
    "calibrate": cmd_calibrate,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "ablation": cmd_ablation,
    "clip-experiment": cmd_clip_experiment,
    "quantize-all": cmd_quantize_all,
}

HELP = {
    "train-fp": "train a full-precision model on the manifest's train split",
    "calibrate": "attach quantizers and calibrate them (PLQ or a uniform baseline)",
    "finetune": "sensitivity-aware finetuning of a calibrated model's quantizers",
    "evaluate": "Y-channel PSNR/SSIM on the eval split; writes output PNGs",
    "sweep": "per-layer activation quantization sensitivity sweep",
    "ablation": "min/max vs +PLQ vs +PLQ+VFT vs +PLQ+SAFT",
    "clip-experiment": "effect of clipping activation outliers in full precision",
    "quantize-all": "calibrate then finetune in one run",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run options")
    g.add_argument("--config", help="JSON file of flat dotted keys; flags override it")
    g.add_argument("--model", help="input model file")
    g.add_argument("--manifest", help="dataset manifest JSON")
    g.add_argument("--out", help="output directory")
    g.add_argument("--bits", help="weight,activation bit widths, e.g. 4,4")
    g.add_argument("--quantizer", choices=("plq", "uniform"), help="activation quantizer")
    g.add_argument("--baseline", choices=baselines.BASELINE_KINDS, help="calibration rule for uniform quantizers")
    g.add_argument("--first-last", dest="first_last", choices=srnet.FIRST_LAST_POLICIES, help="first/last layer policy")
    g.add_argument("--seed", type=int, help="root seed")
    g.add_argument("--epochs", type=int, help="training or finetuning epochs")
    g.add_argument("--lambda", dest="lambda", type=float, help="weight of the reconstruction loss")
    g.add_argument("--beta", type=float, help="calibration EMA coefficient")
    g.add_argument("--lr", type=float, help="learning rate")
    g.add_argument("--dump-activations", dest="dump_activations", action="store_true", help="save calibration activations")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(
        prog="plqsr",
        description="Post-training quantization experiments for super-resolution CNNs.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"plqsr {plqsr.__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        sub.add_parser(
            name, parents=[common], help=HELP[name], description=HELP[name], epilog=EPILOG,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
    return p


@contextlib.contextmanager
def _thread_cap():
    n = os.environ.get("PLQ_THREADS")
    if not n:
        yield None
        return
    try:
        limit = int(n)
        if limit < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"PLQ_THREADS must be a positive integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=limit):
        yield limit


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args.command, args)
        with _thread_cap():
            run = Run(cfg)
            HANDLERS[args.command](run)
            run.finish()
    except (MissingFileError, FileNotFoundError) as exc:
        print(f"plqsr: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (T.NumericError, FloatingPointError) as exc:
        print(f"plqsr: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CalibrationError, QuantError, srnet.ModelFormatError, ImageError, ValueError, KeyError) as exc:
        print(f"plqsr: invalid configuration or input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"plqsr: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
