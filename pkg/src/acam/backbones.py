"""Desk-scale classifier backbones with a channel-adaptable stem.

Layout: stem conv (stride 1) -> stages (first block of each stage downsamples
by 2) -> global average pool -> linear head. The ACAM variant differs from the
baseline only in the stem's input-channel count.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "BACKBONES",
    "BackboneConfig",
    "Classifier",
    "adapt_stem",
    "build_backbone",
    "forward_classify",
    "named_config",
]


@dataclass
class BackboneConfig:
    in_channels: int = 1
    num_classes: int = 6
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 1
    use_residual: bool = True

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be a non-empty list of positive ints, got {self.widths}")
        if self.blocks_per_stage < 0:
            raise ValueError(f"blocks_per_stage must be >= 0, got {self.blocks_per_stage}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**{k: (list(v) if k == "widths" else v) for k, v in d.items()})


# lightweight / traditional / wider stand-ins
BACKBONES = {
    "tiny-plain": dict(widths=[16, 32, 64], blocks_per_stage=1, use_residual=False),
    "tiny-res": dict(widths=[16, 32, 64], blocks_per_stage=1, use_residual=True),
    "tiny-wide": dict(widths=[32, 64, 128], blocks_per_stage=1, use_residual=True),
}


def named_config(name: str, in_channels: int = 1, num_classes: int = 6) -> BackboneConfig:
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}")
    cfg = BackboneConfig(in_channels=in_channels, num_classes=num_classes, **copy.deepcopy(BACKBONES[name]))
    cfg.validate()
    return cfg


def _block_names(cfg: BackboneConfig) -> list[tuple[str, int, int, int]]:
    """(prefix, in_width, out_width, stride) for every block in order."""
    out = []
    prev = cfg.widths[0]
    for s, width in enumerate(cfg.widths):
        for b in range(cfg.blocks_per_stage):
            stride = 2 if b == 0 else 1
            out.append((f"stage{s + 1}.block{b}", prev, width, stride))
            prev = width
    return out


class Classifier:
    """Parameter container plus forward pass for one backbone configuration."""

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def feature_width(self) -> int:
        if self.config.blocks_per_stage == 0:
            return self.config.widths[0]
        return self.config.widths[-1]

    def spatial_layers(self) -> list[str]:
        """Names of layers whose outputs have spatial extent (Grad-CAM targets)."""
        return ["stem"] + [name for name, *_ in _block_names(self.config)]

    def copy(self) -> "Classifier":
        return Classifier(
            copy.deepcopy(self.config),
            {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()},
        )

    def astype(self, dtype) -> "Classifier":
        return Classifier(
            copy.deepcopy(self.config),
            {n: Tensor(t.data.astype(dtype), requires_grad=True, name=n) for n, t in self.params.items()},
        )

    def __call__(self, x: Tensor, capture: dict | None = None) -> Tensor:
        return forward_classify(self, x, capture)


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> np.ndarray:
    # He-uniform for ReLU stacks
    fan_in = cin * k * k
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)


def build_backbone(cfg: BackboneConfig, seed: int, dtype=np.float32) -> Classifier:
    """Deterministic weights from ``seed``; all biases start at zero."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, np.ndarray] = {}
    w0 = cfg.widths[0]
    # stem drawn for one channel, then spread, so the seed fixes the same
    # stage/head weights for every in_channels
    params["stem.weight"] = _conv_init(rng, w0, 1, 3, dtype)
    params["stem.bias"] = np.zeros(w0, dtype=dtype)
    for name, cin, cout, stride in _block_names(cfg):
        params[f"{name}.conv1.weight"] = _conv_init(rng, cout, cin, 3, dtype)
        params[f"{name}.conv1.bias"] = np.zeros(cout, dtype=dtype)
        params[f"{name}.conv2.weight"] = _conv_init(rng, cout, cout, 3, dtype)
        params[f"{name}.conv2.bias"] = np.zeros(cout, dtype=dtype)
        if cfg.use_residual and (cin != cout or stride != 1):
            params[f"{name}.proj.weight"] = _conv_init(rng, cout, cin, 1, dtype)
            params[f"{name}.proj.bias"] = np.zeros(cout, dtype=dtype)
    feat = cfg.widths[-1] if cfg.blocks_per_stage else w0
    bound = np.sqrt(1.0 / feat)
    params["head.weight"] = rng.uniform(-bound, bound, size=(cfg.num_classes, feat)).astype(dtype)
    params["head.bias"] = np.zeros(cfg.num_classes, dtype=dtype)

    base = Classifier(
        BackboneConfig(1, cfg.num_classes, list(cfg.widths), cfg.blocks_per_stage, cfg.use_residual),
        {n: Tensor(a, requires_grad=True, name=n) for n, a in params.items()},
    )
    return adapt_stem(base, cfg.in_channels) if cfg.in_channels != 1 else base


def adapt_stem(c: Classifier, k: int) -> Classifier:
    """Return a copy whose stem takes ``k`` channels.

    A 1-channel stem is replicated across the new channels and divided by k, so
    k identical copies of an image give the original stem response.
    """
    if k < 1:
        raise ValueError(f"adapt_stem: k must be >= 1, got {k}")
    out = c.copy()
    cin = c.config.in_channels
    if k == cin:
        return out
    if cin != 1:
        raise ValueError(f"adapt_stem: can only widen a 1-channel stem, this one has {cin}")
    w = c.params["stem.weight"].data
    spread = np.repeat(w, k, axis=1) / w.dtype.type(k)
    out.params["stem.weight"] = Tensor(spread.astype(w.dtype), requires_grad=True, name="stem.weight")
    out.config.in_channels = k
    return out


def forward_classify(c: Classifier, x: Tensor, capture: dict | None = None) -> Tensor:
    """Logits [B, num_classes] for x [B, in_channels, H, W].

    ``capture``, if given, receives the output tensor of each spatial layer
    (``stem``, ``stageS.blockB``) plus ``gap``.
    """
    if x.ndim != 4 or x.shape[1] != c.config.in_channels:
        raise dc.DimensionError(
            f"forward_classify: expected {c.config.in_channels} input channels (axis 1), got shape {x.shape}"
        )
    p = c.params
    h = dc.relu(dc.conv2d(x, p["stem.weight"], p["stem.bias"], stride=1, padding=1))
    if capture is not None:
        capture["stem"] = h
    for name, cin, cout, stride in _block_names(c.config):
        y = dc.relu(dc.conv2d(h, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], stride=stride, padding=1))
        y = dc.conv2d(y, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], stride=1, padding=1)
        if c.config.use_residual:
            if f"{name}.proj.weight" in p:
                skip = dc.conv2d(h, p[f"{name}.proj.weight"], p[f"{name}.proj.bias"], stride=stride, padding=0)
            else:
                skip = h
            y = dc.add(y, skip)
        h = dc.relu(y)
        if capture is not None:
            capture[name] = h
    pooled = dc.global_avg_pool(h)
    if capture is not None:
        capture["gap"] = pooled
    return dc.linear(pooled, p["head.weight"], p["head.bias"])
