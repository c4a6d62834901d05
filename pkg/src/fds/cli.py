"""Command-line entry points: dataset synthesis, training, evaluation, and
augmentation preview.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Configuration is a TOML/flag hybrid: values come from built-in defaults,
then the optional config file's [train] table, then explicit flags, in
increasing precedence. FDS_SEED serves as the seed fallback when neither a
flag nor the config file provides one.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import logging
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image as PILImage

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__, losses, metrics, trainer
from .dataset import (
    DatasetError,
    Mask,
    SyntheticSpec,
    _read_image,
    _read_mask,
    build_episode,
    generate_synthetic,
    load_mvtec_category,
    resize_pair,
)
from .model import ModelConfig, SegmentationModel, image_to_tensor, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate_model, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; we need usage errors = 1."""

    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunManifest:
    """Self-describing run header, written before any training compute."""

    config: dict
    model_config: dict
    dataset_hash: str
    build: str
    seed: int
    outputs: dict
    data_path: str
    category: str
    per_defect_type: bool
    created_utc: str

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _build_id() -> str:
    base = f"fds {__version__} / torch {torch.__version__}"
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if rev.returncode == 0:
            return f"{base} / {rev.stdout.strip()}"
    except Exception:
        pass
    return base


def _hash_tree(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()


def _resolve_category(data: str, category: Optional[str]) -> tuple[Path, str]:
    """Accept either a category directory or a root holding one category."""
    p = Path(data)
    if not p.is_dir():
        raise DatasetError(f"dataset path does not exist: {p}")
    if (p / "train" / "good").is_dir():
        return p.parent, p.name
    if category is not None:
        if not (p / category / "train" / "good").is_dir():
            raise DatasetError(f"category {category!r} not found under {p}")
        return p, category
    cats = sorted(d.name for d in p.iterdir() if (d / "train" / "good").is_dir())
    if len(cats) == 1:
        return p, cats[0]
    if not cats:
        raise DatasetError(f"no MVTec-layout category found under {p}")
    raise UsageError(f"multiple categories under {p} ({cats}); pass --category")


def _read_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DatasetError(f"config file not found: {p}")
    with open(p, "rb") as fh:
        doc = tomllib.load(fh)
    table = doc.get("train", {})
    if not isinstance(table, dict):
        raise UsageError("[train] in the config file must be a table")
    return table


_LAMBDA_FLAG_TO_MODE = {"computed": "computed", "fixed1": "fixed_one"}

# CLI/file option name -> TrainConfig field
_TRAIN_KEYS = {
    "k": "k_shot",
    "batch": "batch_size",
    "lr": "lr",
    "iters": "iterations",
    "cap_prob": "cap_probability",
    "seed": "seed",
    "ablation": "ablation",
    "lambda_mode": "lambda_mode",
    "nbr_metric": "nbr_metric",
    "bce_reduction": "bce_reduction",
    "baseline_cap_augment": "baseline_cap_augment",
    "mask_downsample": "mask_downsample",
    "eval_every": "eval_every",
    "checkpoint_every": "checkpoint_every",
    "threshold": "threshold",
}
_EXTRA_KEYS = {"profile", "resolution", "per_defect_type"}


def _merge_train_config(args) -> tuple[TrainConfig, ModelConfig, bool]:
    file_cfg = _read_config_file(args.config)
    unknown = set(file_cfg) - set(_TRAIN_KEYS) - _EXTRA_KEYS
    if unknown:
        raise UsageError(f"unknown [train] config keys: {sorted(unknown)}")

    merged: dict = {}
    for key, field in _TRAIN_KEYS.items():
        if file_cfg.get(key) is not None:
            merged[field] = file_cfg[key]
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            merged[field] = flag_val
    if "lambda_mode" in merged:
        merged["lambda_mode"] = _LAMBDA_FLAG_TO_MODE.get(
            merged["lambda_mode"], merged["lambda_mode"]
        )

    if "seed" not in merged:
        env = os.environ.get("FDS_SEED")
        if env is not None:
            try:
                merged["seed"] = int(env)
            except ValueError:
                raise UsageError(f"FDS_SEED must be an integer, got {env!r}")

    profile = args.profile or file_cfg.get("profile") or "tiny"
    if profile not in ("tiny", "full"):
        raise UsageError(f"profile must be 'tiny' or 'full', got {profile!r}")
    mc = ModelConfig.tiny() if profile == "tiny" else ModelConfig.default()
    resolution = args.resolution or file_cfg.get("resolution")
    if resolution is not None:
        mc = dataclasses.replace(mc, input_resolution=int(resolution))

    pdt = args.per_defect_type
    if pdt is None:
        pdt = file_cfg.get("per_defect_type")
    if pdt is None:
        pdt = True

    try:
        return TrainConfig(**merged), mc, bool(pdt)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid training configuration: {e}") from e


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        texture_kind=args.texture,
        defect_kind=args.defect,
        counts=(args.n_normal_train, args.n_defect_train, args.n_defect_test),
        resolution=args.resolution or 64,
        seed=args.seed if args.seed is not None else int(os.environ.get("FDS_SEED", 0)),
        n_normal_test=args.n_normal_test,
    )
    summary = generate_synthetic(spec, args.out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _write_overlay(img, gt: Mask, pred: Mask, path):
    """Groundtruth contour in green, prediction filled red at half alpha."""
    rgb = img.pixels.copy()
    p = pred.values.astype(bool)
    rgb[p] = 0.5 * rgb[p] + 0.5 * np.array([1.0, 0.0, 0.0], dtype=np.float32)
    g = gt.values.astype(bool)
    interior = g.copy()
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        interior &= np.roll(g, shift, axis=axis)
    contour = g & ~interior
    rgb[contour] = np.array([0.0, 1.0, 0.0], dtype=np.float32)
    PILImage.fromarray((np.clip(rgb, 0, 1) * 255 + 0.5).astype(np.uint8)).save(path)


def _dump_overlays(model, pairs, out_dir: Path, threshold: float):
    out_dir.mkdir(parents=True, exist_ok=True)
    res = model.config.input_resolution
    with torch.no_grad():
        for i, (img, mask) in enumerate(pairs):
            img_r, mask_r = resize_pair(img, mask, res)
            x = image_to_tensor(img_r)[None]
            pred = metrics.binarize(model.net(x)[0][0, 0].numpy(), threshold)
            _write_overlay(img_r, mask_r, pred, out_dir / f"overlay_{i:03d}.png")


def _write_report(report: metrics.MetricReport, out: Path):
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    if report.anomaly is not None:
        report.save_roc_plot(out / "roc.png")


def cmd_train(args) -> int:
    cfg, model_cfg, per_defect_type = _merge_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    root, category = _resolve_category(args.data, args.category)
    normal_train, defect_pool, normal_test = load_mvtec_category(root, category)
    episode = build_episode(
        defect_pool, normal_train, cfg.k_shot, cfg.seed, per_defect_type=per_defect_type
    )

    outputs = {
        "checkpoint": str(out / "checkpoint.pt"),
        "trainlog": str(out / "trainlog.jsonl"),
        "metrics_json": str(out / "metrics.json"),
        "metrics_csv": str(out / "metrics.csv"),
        "roc_plot": str(out / "roc.png"),
    }
    manifest = RunManifest(
        config=cfg.to_dict(),
        model_config=model_cfg.to_dict(),
        dataset_hash=_hash_tree(root / category),
        build=_build_id(),
        seed=cfg.seed,
        outputs=outputs,
        data_path=str(root / category),
        category=category,
        per_defect_type=per_defect_type,
        created_utc=datetime.datetime.now(datetime.timezone.utc).isoformat(),
    )
    manifest.write(out / "manifest.json")

    model = SegmentationModel(model_cfg, init_seed=cfg.seed)
    model, log = train(episode, model, cfg, checkpoint_dir=out if cfg.checkpoint_every else None)

    save_checkpoint(model, outputs["checkpoint"], cfg.seed)
    log.write_jsonl(outputs["trainlog"])

    evals = evaluate_model(
        model, episode.test_pairs, normal_test,
        threshold=cfg.threshold, category=category,
    )
    report = metrics.aggregate(evals)
    _write_report(report, out)
    if args.dump_overlays:
        _dump_overlays(model, episode.test_pairs, out / "overlays", cfg.threshold)

    print(f"trained {cfg.ablation} ({cfg.iterations} iterations, seed {cfg.seed})")
    print(f"final mean IOU: {report.overall_mean_iou:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DatasetError(f"checkpoint not found: {ckpt}")
    try:
        model, seed = load_checkpoint(ckpt)
    except ValueError as e:
        raise DatasetError(str(e)) from e

    manifest_path = Path(args.manifest) if args.manifest else ckpt.parent / "manifest.json"
    k = args.k
    per_defect_type = args.per_defect_type
    if manifest_path.is_file():
        manifest = RunManifest.read(manifest_path)
        k = k if k is not None else manifest.config["k_shot"]
        seed = args.seed if args.seed is not None else manifest.seed
        if per_defect_type is None:
            per_defect_type = manifest.per_defect_type
    else:
        if k is None:
            raise UsageError(
                "no manifest next to the checkpoint; pass --k (and optionally --seed) "
                "to reconstruct the evaluation split"
            )
        seed = args.seed if args.seed is not None else seed
    if per_defect_type is None:
        per_defect_type = True

    root, category = _resolve_category(args.data, args.category)
    normal_train, defect_pool, normal_test = load_mvtec_category(root, category)
    episode = build_episode(defect_pool, normal_train, k, seed, per_defect_type=per_defect_type)

    threshold = args.threshold if args.threshold is not None else 0.5
    evals = evaluate_model(
        model, episode.test_pairs, normal_test, threshold=threshold, category=category
    )
    report = metrics.aggregate(evals)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(report, out)
    if args.dump_overlays:
        _dump_overlays(model, episode.test_pairs, out / "overlays", threshold)
    print(report.to_json(), end="")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    d_img = _read_image(Path(args.defect_image))
    d_mask = _read_mask(Path(args.defect_mask))
    n_img = _read_image(Path(args.normal_image))
    try:
        composite = losses.cap_compose(d_img, d_mask, n_img)
    except ValueError as e:
        raise DatasetError(str(e)) from e

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "composite.png"
    PILImage.fromarray((np.clip(composite.pixels, 0, 1) * 255 + 0.5).astype(np.uint8)).save(path)

    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        res = model.config.input_resolution
        dr, mr = resize_pair(d_img, d_mask, res)
        cr, _ = resize_pair(composite, mr, res)
        f_d, _ = model.encode(dr)
        f_c, _ = model.encode(cr)
        lam = float(losses.realism_weight(f_d, f_c))
        print(f"lambda = {lam:.6f}")
    else:
        print("lambda unavailable (pass --checkpoint for encoder features)")
    print(f"composite written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="fds", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset tree")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--texture", default="stripes",
                         choices=("stripes", "checker", "noise-blobs"))
    p_synth.add_argument("--defect", default="blob",
                         choices=("scratch-line", "blob", "hole"))
    p_synth.add_argument("--n-normal-train", type=int, default=24)
    p_synth.add_argument("--n-defect-train", type=int, default=4)
    p_synth.add_argument("--n-defect-test", type=int, default=8)
    p_synth.add_argument("--n-normal-test", type=int, default=8)
    p_synth.add_argument("--resolution", type=int, default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train on one category")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--config", default=None, help="TOML file with a [train] table")
    p_train.add_argument("--category", default=None)
    p_train.add_argument("--k", type=int, choices=(1, 5), default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--ablation", choices=trainer.ABLATIONS, default=None)
    p_train.add_argument("--lambda-mode", dest="lambda_mode",
                         choices=("computed", "fixed1"), default=None)
    p_train.add_argument("--nbr-metric", dest="nbr_metric",
                         choices=trainer.NBR_METRICS, default=None)
    p_train.add_argument("--cap-prob", dest="cap_prob", type=float, default=None)
    p_train.add_argument("--iters", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--batch", type=int, default=None)
    p_train.add_argument("--resolution", type=int, default=None)
    p_train.add_argument("--bce-reduction", dest="bce_reduction",
                         choices=("sum", "mean"), default=None)
    p_train.add_argument("--threshold", type=float, default=None)
    p_train.add_argument("--profile", choices=("tiny", "full"), default=None)
    p_train.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p_train.add_argument("--checkpoint-every", dest="checkpoint_every",
                         type=int, default=None)
    p_train.add_argument("--baseline-cap-augment", dest="baseline_cap_augment",
                         action=argparse.BooleanOptionalAction, default=None)
    p_train.add_argument("--mask-downsample", dest="mask_downsample",
                         choices=losses.MASK_DOWNSAMPLE_MODES, default=None)
    p_train.add_argument("--per-defect-type", dest="per_defect_type",
                         action=argparse.BooleanOptionalAction, default=None)
    p_train.add_argument("--dump-overlays", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a test split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--manifest", default=None)
    p_eval.add_argument("--category", default=None)
    p_eval.add_argument("--k", type=int, choices=(1, 5), default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--threshold", type=float, default=None)
    p_eval.add_argument("--per-defect-type", dest="per_defect_type",
                        action=argparse.BooleanOptionalAction, default=None)
    p_eval.add_argument("--dump-overlays", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_prev = sub.add_parser("augment-preview",
                            help="compose one paste augmentation and report its realism")
    p_prev.add_argument("--defect-image", required=True)
    p_prev.add_argument("--defect-mask", required=True)
    p_prev.add_argument("--normal-image", required=True)
    p_prev.add_argument("--checkpoint", default=None)
    p_prev.add_argument("--out", required=True)
    p_prev.set_defaults(func=cmd_augment_preview)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except losses.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main_entry():
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    main_entry()
