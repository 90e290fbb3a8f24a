"""Run configuration: one YAML/JSON document plus ``--set`` overrides.

Schema (all keys optional; defaults shown)::

    seed: 0                      # root seed; sub-seeds derived by rng.derive_seed
    output_dir: runs/default
    data:
      manifest: null             # CSV path; mutually exclusive with `phantom`
      image_size: null           # resize manifest images to a square of this side
      phantom:                   # used when no manifest is given
        num_classes: 6
        images_per_class: 150
        height: 64
        width: 64
        contrast_range: [0.15, 0.8]
        speckle_strength: 0.25
        blur_sigma: 1.0
        patient_block: 6
      train_fraction: 0.7
      split_level: patient       # or image
    backbone: tiny-res           # tiny-plain | tiny-res | tiny-wide
    train: {epochs: 20, batch_size: 32, lr: 0.001, adam_beta1: 0.9,
            adam_beta2: 0.999, adam_eps: 1.0e-8, use_acam: false, K: 10,
            freeze_stage1: false, seed: <root seed>}
    range: {alpha_min: 1.0, alpha_max: 3.0}
    ablate: {seeds: [0, 1, 2, 3, 4], control: false}
    log: {wall_time: false}      # write wall-clock seconds into history.csv

Derived seeds: phantoms use derive_seed(seed, "phantom"), the split uses
derive_seed(seed, "split").
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .backbones import BACKBONES, BackboneConfig, named_config
from .contrast import RangeSpec
from .data import PhantomSpec
from .rng import derive_seed
from .train import ConfigError, TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "manifest": None,
        "image_size": None,
        "phantom": {
            "num_classes": 6,
            "images_per_class": 150,
            "height": 64,
            "width": 64,
            "contrast_range": [0.15, 0.8],
            "speckle_strength": 0.25,
            "blur_sigma": 1.0,
            "patient_block": 6,
        },
        "train_fraction": 0.7,
        "split_level": "patient",
    },
    "backbone": "tiny-res",
    "train": {
        "epochs": 20,
        "batch_size": 32,
        "lr": 0.001,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "use_acam": False,
        "K": 10,
        "freeze_stage1": False,
        "seed": None,
    },
    "range": {"alpha_min": 1.0, "alpha_max": 3.0},
    "ablate": {"seeds": [0, 1, 2, 3, 4], "control": False},
    "log": {"wall_time": False},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if val is None and key == "phantom":
                out[key] = None
                continue
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    val = yaml.safe_load(raw)
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = val
    return out


def _deep_update(dst: dict, src: dict) -> None:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _deep_update(dst[k], v)
        else:
            dst[k] = v


@dataclass
class RunConfig:
    raw: dict
    seed: int
    output_dir: Path
    phantom: PhantomSpec | None
    manifest: Path | None
    image_size: int | None
    train_fraction: float
    split_level: str
    backbone: str
    train: TrainConfig
    range: RangeSpec
    ablate_seeds: list[int]
    ablate_control: bool
    wall_time: bool

    @property
    def split_seed(self) -> int:
        return derive_seed(self.seed, "split")

    def backbone_config(self, use_acam: bool | None = None) -> BackboneConfig:
        acam = self.train.use_acam if use_acam is None else use_acam
        ncls = self.phantom.num_classes if self.phantom is not None else 6
        return named_config(self.backbone, in_channels=self.train.K if acam else 1, num_classes=ncls)


def _build(d: dict, user: dict) -> RunConfig:
    try:
        seed = int(d["seed"])
        data = d["data"]
        user_data = user.get("data", {}) or {}
        manifest = data.get("manifest")
        if manifest is not None and "phantom" in user_data and user_data["phantom"] is not None:
            raise ConfigError("data: give exactly one source, either `manifest` or `phantom`")
        phantom = None
        if manifest is None:
            p = dict(data["phantom"] or {})
            p["contrast_range"] = tuple(float(x) for x in p.get("contrast_range", (0.15, 0.8)))
            known = {f.name for f in fields(PhantomSpec)}
            bad = sorted(set(p) - known)
            if bad:
                raise ConfigError(f"data.phantom: unknown keys {bad}")
            phantom = PhantomSpec(**{**p, "seed": derive_seed(seed, "phantom")})
            try:
                phantom.validate()
            except ValueError as exc:
                raise ConfigError(f"data.phantom: {exc}") from exc
        frac = float(data["train_fraction"])
        if not 0 < frac < 1:
            raise ConfigError(f"data.train_fraction must be in (0, 1), got {frac}")
        level = data["split_level"]
        if level not in ("patient", "image"):
            raise ConfigError(f"data.split_level must be 'patient' or 'image', got {level!r}")
        if d["backbone"] not in BACKBONES:
            raise ConfigError(f"unknown backbone {d['backbone']!r}; choose from {sorted(BACKBONES)}")
        t = dict(d["train"])
        if t.get("seed") is None:
            t["seed"] = seed
        train = TrainConfig(**t)
        train.validate()
        try:
            rng_spec = RangeSpec(float(d["range"]["alpha_min"]), float(d["range"]["alpha_max"]))
        except ValueError as exc:
            raise ConfigError(f"range: {exc}") from exc
        seeds = [int(s) for s in d["ablate"]["seeds"]]
        image_size = data.get("image_size")
        if image_size is not None and int(image_size) < 8:
            raise ConfigError(f"data.image_size must be >= 8, got {image_size}")
        return RunConfig(
            raw=d,
            seed=seed,
            output_dir=Path(d["output_dir"]),
            phantom=phantom,
            manifest=Path(manifest) if manifest is not None else None,
            image_size=int(image_size) if image_size is not None else None,
            train_fraction=frac,
            split_level=level,
            backbone=d["backbone"],
            train=train,
            range=rng_spec,
            ablate_seeds=seeds,
            ablate_control=bool(d["ablate"]["control"]),
            wall_time=bool(d["log"]["wall_time"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path=None, overrides: list[dict] | None = None) -> RunConfig:
    user: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {p}: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a mapping")
        user = loaded or {}
    for o in overrides or []:
        _deep_update(user, o)
    merged = _merge(DEFAULTS, user)
    return _build(merged, user)
