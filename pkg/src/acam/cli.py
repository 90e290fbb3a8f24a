"""Command-line entry point: ``acam {synth,train,eval,ablate,transform,explain}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error. Errors are
printed to stderr as ``acam: error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .config import RunConfig, load_config, parse_override
from .contrast import GrayImage, image_mean, multiview_stack
from .data import (
    CLASS_NAMES,
    Dataset,
    IngestionError,
    class_names,
    generate_phantoms,
    load_dataset,
    patient_split,
    phantom_dataset,
    read_pgm,
    write_manifest,
    write_pgm,
)
from .evaluation import evaluate, write_report
from .explain import grad_cam, heatmap_filename, overlay_rgb, upsample
from .train import ConfigError, TrainConfig, load_model, train_model

log = logging.getLogger("acam")


class RuntimeFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _names(cfg: RunConfig) -> tuple[str, ...]:
    return class_names(cfg.phantom.num_classes) if cfg.phantom is not None else CLASS_NAMES


def load_data(cfg: RunConfig) -> Dataset:
    """Dataset from the configured source, with train/test assigned."""
    if cfg.phantom is not None:
        ds = phantom_dataset(cfg.phantom)
    else:
        ds = load_dataset(cfg.manifest, CLASS_NAMES, cfg.image_size)
    if any(r.split == "unassigned" for r in ds.records):
        ds = ds.with_records(patient_split(ds.records, cfg.train_fraction, cfg.split_seed, cfg.split_level))
    return ds


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeFailure(f"cannot create output directory {path}: {exc}") from exc
    return path


def _load_image(path) -> GrayImage:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"image {p} not found")
    try:
        return GrayImage(read_pgm(p), id=p.stem)
    except ValueError as exc:
        raise ConfigError(f"image {p}: {exc}") from exc


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint {path} not found")
    return load_model(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: Path) -> Path:
    if cfg.phantom is None:
        raise ConfigError("synth needs a phantom data source (data.manifest is set)")
    images, records = generate_phantoms(cfg.phantom)
    records = patient_split(records, cfg.train_fraction, cfg.split_seed, cfg.split_level)
    _prepare_out(out / "images")
    for img, rec in zip(images, records):
        rec.image_path = f"images/{img.id}.pgm"
        write_pgm(out / rec.image_path, img.pixels)
    write_manifest(out / "manifest.csv", records, _names(cfg))
    log.info("wrote %d images to %s", len(images), out)
    return out / "manifest.csv"


def cmd_train(cfg: RunConfig, out: Path):
    data = load_data(cfg)
    train, test = data.subset("train"), data.subset("test")
    _prepare_out(out)
    meta = {"backbone_name": cfg.backbone, "class_names": list(_names(cfg))}
    result = train_model(cfg.train, cfg.backbone_config(), train, test, cfg.range, out, meta)
    result.history.write_csv(out / "history.csv", wall_time=cfg.wall_time)
    plotting.history_figure(result.history, out / "history.png")
    return result


def cmd_eval(cfg: RunConfig, checkpoint, out: Path, split: str = "test"):
    classifier, predictor, rng_spec, meta = _load_checkpoint(checkpoint)
    data = load_data(cfg)
    subset = data if split == "all" else data.subset(split)
    if len(subset) == 0:
        raise ConfigError(f"no images in split {split!r}")
    if subset.num_classes != classifier.config.num_classes:
        raise ConfigError(f"data has {subset.num_classes} classes, checkpoint {classifier.config.num_classes}")
    names = list(meta.get("class_names") or _names(cfg))
    _prepare_out(out)
    result = evaluate(classifier, predictor, subset, rng_spec)
    write_report(result, out, names, {"checkpoint": Path(checkpoint).name, "split": split,
                                      "use_acam": predictor is not None})
    plotting.confusion_figure(result.confusion.counts, names, out / "confusion.png")
    plotting.curves_figure(result.curves.roc, names, out / "roc.png", "roc")
    plotting.curves_figure(result.curves.pr, names, out / "pr.png", "pr")
    return result


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    if len(cfg.ablate_seeds) < 1:
        raise ConfigError("ablate.seeds must list at least one seed")
    data = load_data(cfg)
    train, test = data.subset("train"), data.subset("test")
    _prepare_out(out)
    acam_arm = not cfg.ablate_control
    rows = []
    for seed in cfg.ablate_seeds:
        accs = {}
        for arm, use in (("baseline", False), ("acam", acam_arm)):
            tcfg = TrainConfig(**{**cfg.train.__dict__, "use_acam": use, "seed": seed,
                                  "freeze_stage1": cfg.train.freeze_stage1 and use})
            res = train_model(tcfg, cfg.backbone_config(use_acam=use), train, test, cfg.range)
            accs[arm] = res.history.records[-1].test_acc
            log.info("seed %d %s test_acc %.4f", seed, arm, accs[arm])
        rows.append({"seed": seed, "baseline_acc": accs["baseline"], "acam_acc": accs["acam"],
                     "delta": accs["acam"] - accs["baseline"]})
    mean_b = float(np.mean([r["baseline_acc"] for r in rows]))
    mean_a = float(np.mean([r["acam_acc"] for r in rows]))
    summary = {
        "backbone": cfg.backbone,
        "K": cfg.train.K,
        "range": [cfg.range.alpha_min, cfg.range.alpha_max],
        "control": cfg.ablate_control,
        "rows": rows,
        "mean_baseline_acc": mean_b,
        "mean_acam_acc": mean_a,
        "mean_delta": mean_a - mean_b,
    }
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "baseline_acc", "acam_acc", "delta"])
        for r in rows:
            w.writerow([r["seed"], f"{r['baseline_acc']:.6f}", f"{r['acam_acc']:.6f}", f"{r['delta']:+.6f}"])
        w.writerow(["mean", f"{mean_b:.6f}", f"{mean_a:.6f}", f"{summary['mean_delta']:+.6f}"])
    (out / "ablation.json").write_text(json.dumps(summary, indent=2) + "\n")
    plotting.ablation_figure(rows, out / "ablation.png", cfg.backbone)
    return summary


def cmd_transform(checkpoint, image_path, out: Path, verbose: bool = False):
    _, predictor, rng_spec, _ = _load_checkpoint(checkpoint)
    if predictor is None:
        raise ConfigError(f"checkpoint {checkpoint} has no ACAM predictor")
    img = _load_image(image_path)
    stack = multiview_stack(img, predictor, rng_spec)
    if verbose:
        src = image_mean(img)
        for k, v in enumerate(stack.views):
            gap = abs(float(v.astype(np.float64).mean()) - src)
            if gap > 1e-5:
                raise RuntimeFailure(f"view {k} mean differs from source mean by {gap:.3g}")
        log.info("all %d view means match the source mean %.6f within 1e-5", stack.alphas.k, src)
    _prepare_out(out)
    for k, v in enumerate(stack.views):
        write_pgm(out / f"view_{k:02d}.pgm", v)
    (out / "alphas.txt").write_text("".join(f"{a:.6f}\n" for a in stack.alphas.alphas))
    plotting.views_figure(img.pixels, stack.views, stack.alphas.alphas, out / "views.png")
    return stack


def cmd_explain(checkpoint, image_path, target_class: int, layer, out: Path, include_acam: bool = True):
    classifier, predictor, rng_spec, _ = _load_checkpoint(checkpoint)
    img = _load_image(image_path)
    try:
        heat = grad_cam(classifier, img, target_class, layer, predictor, rng_spec, include_acam)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _prepare_out(out)
    up = upsample(heat, img.height, img.width)
    base = out / heatmap_filename(img.id, heat.target_class, heat.layer_name, "")
    write_pgm(base.with_suffix(".pgm"), heat.values)
    write_pgm(Path(f"{base}_upsampled.pgm"), up)
    plotting.plt.imsave(f"{base}_overlay.png", overlay_rgb(img.pixels, up), metadata=plotting.PNG_METADATA)
    return heat


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="root seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acam", description="Adaptive contrast adjustment experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a phantom dataset (PGM images + manifest.csv)")
    _add_config_args(p)

    p = sub.add_parser("train", help="train a baseline or ACAM model")
    _add_config_args(p)
    p.add_argument("--backbone")
    p.add_argument("--use-acam", action="store_true", default=None)
    p.add_argument("--freeze-stage1", action="store_true", default=None)
    p.add_argument("--K", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured data")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["test", "train", "all"], default="test")

    p = sub.add_parser("ablate", help="paired baseline vs ACAM runs over seeds")
    _add_config_args(p)
    p.add_argument("--backbone")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--epochs", type=int)
    p.add_argument("--control", action="store_true", default=None, help="both arms without ACAM")

    p = sub.add_parser("transform", help="export the K contrast views of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("explain", help="Grad-CAM heatmap for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="target_class", type=int, required=True)
    p.add_argument("--layer")
    p.add_argument("--no-acam-grad", action="store_true", help="treat predicted gains as constants")
    p.add_argument("--out", required=True)
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = [parse_override(s) for s in args.set]
    flag_map = {
        "seed": ("seed",),
        "out": ("output_dir",),
        "backbone": ("backbone",),
        "use_acam": ("train", "use_acam"),
        "freeze_stage1": ("train", "freeze_stage1"),
        "K": ("train", "K"),
        "epochs": ("train", "epochs"),
        "control": ("ablate", "control"),
    }
    for attr, path in flag_map.items():
        val = getattr(args, attr, None)
        if val is None:
            continue
        o: dict = {}
        cur = o
        for key in path[:-1]:
            cur = cur.setdefault(key, {})
        cur[path[-1]] = val
        overrides.append(o)
    if getattr(args, "seeds", None):
        try:
            overrides.append({"ablate": {"seeds": [int(s) for s in args.seeds.split(",") if s.strip()]}})
        except ValueError as exc:
            raise ConfigError(f"--seeds: {exc}") from exc
    return load_config(args.config, overrides)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command in ("transform", "explain"):
            out = Path(args.out)
            if args.command == "transform":
                cmd_transform(args.checkpoint, args.image, out, verbose=args.verbose)
            else:
                cmd_explain(args.checkpoint, args.image, args.target_class, args.layer, out,
                            include_acam=not args.no_acam_grad)
            return 0
        cfg = _config_from_args(args)
        out = cfg.output_dir
        if args.command == "synth":
            cmd_synth(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, out, args.split)
        elif args.command == "ablate":
            summary = cmd_ablate(cfg, out)
            print(f"mean_delta {summary['mean_delta']:+.6f}")
        return 0
    except (ConfigError, IngestionError) as exc:
        print(f"acam: error: config: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"acam: error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
