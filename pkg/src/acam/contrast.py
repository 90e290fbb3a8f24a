"""Adaptive contrast adjustment: gain prediction, range mapping, view generation.

A shallow texture network scores each image, the scores are squashed into a
fixed gain interval, and each gain produces one linearly contrast-stretched
view about the image mean. The K views are the module output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "ContrastParams",
    "GrayImage",
    "MultiViewStack",
    "PredictorWeights",
    "RangeSpec",
    "acam_forward",
    "apply_contrast",
    "generate_views",
    "image_mean",
    "init_predictor",
    "map_to_range",
    "multiview_stack",
    "predict_raw",
    "zero_predictor",
]

MIN_SIDE = 8


@dataclass
class GrayImage:
    """Single-channel image with pixel values in [0, 1]."""

    pixels: np.ndarray
    id: str = ""
    label: int | None = None
    patient_id: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype.kind != "f":
            px = px.astype(np.float32)
        if px.ndim != 2:
            raise ValueError(f"GrayImage {self.id!r}: expected a 2-d array, got shape {px.shape}")
        if min(px.shape) < MIN_SIDE:
            raise ValueError(f"GrayImage {self.id!r}: sides must be >= {MIN_SIDE}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValueError(f"GrayImage {self.id!r}: pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class RangeSpec:
    alpha_min: float = 1.0
    alpha_max: float = 3.0

    def __post_init__(self):
        if not (0 < self.alpha_min < self.alpha_max) or not np.isfinite(self.alpha_max):
            raise ValueError(
                f"RangeSpec requires 0 < alpha_min < alpha_max, got ({self.alpha_min}, {self.alpha_max})"
            )


@dataclass
class ContrastParams:
    alphas: np.ndarray
    range: RangeSpec = field(default_factory=RangeSpec)

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        if a.size < 1:
            raise ValueError("ContrastParams needs at least one gain")
        if np.any(a <= self.range.alpha_min) or np.any(a >= self.range.alpha_max):
            raise ValueError(f"gains must lie strictly inside ({self.range.alpha_min}, {self.range.alpha_max})")
        self.alphas = a

    @property
    def k(self) -> int:
        return self.alphas.size


@dataclass
class MultiViewStack:
    views: np.ndarray  # [K, H, W]
    source_id: str
    alphas: ContrastParams


# ---------------------------------------------------------------------------
# linear contrast
# ---------------------------------------------------------------------------


def _as_image_tensor(img) -> Tensor:
    if isinstance(img, GrayImage):
        return Tensor(img.pixels)
    if isinstance(img, Tensor):
        return img
    return Tensor(np.asarray(img))


def _contrast_batch(x: Tensor, alphas: Tensor) -> Tensor:
    """x [B,1,H,W], alphas [B,K] -> [B,K,H,W] with view_k = x + (a_k - 1)(x - mean(x)).

    Algebraically a*(x - mu) + mu; this arrangement makes a == 1 reproduce x exactly.
    """
    b, c, h, w = x.shape
    if c != 1:
        raise dc.DimensionError(f"contrast: expected one input channel (axis 1), got {c}")
    if alphas.ndim != 2 or alphas.shape[0] != b:
        raise dc.DimensionError(f"contrast: gains {alphas.shape} do not match batch size {b}")
    k = alphas.shape[1]
    full = (b, k, h, w)
    mu = dc.broadcast_to(dc.reshape(dc.global_avg_pool(x), (b, 1, 1, 1)), full)
    xb = dc.broadcast_to(x, full)
    ones = Tensor(np.ones(alphas.shape, dtype=alphas.dtype))
    gain = dc.broadcast_to(dc.reshape(dc.sub(alphas, ones), (b, k, 1, 1)), full)
    return dc.add(xb, dc.mul(gain, dc.sub(xb, mu)))


def image_mean(img) -> float:
    """Arithmetic mean intensity over all pixels."""
    t = _as_image_tensor(img)
    h, w = t.shape[-2:]
    with dc.no_grad():
        return float(dc.global_avg_pool(dc.reshape(t, (1, 1, h, w))).data[0, 0])


def apply_contrast(img, alpha) -> Tensor:
    """Stretch deviations from the image mean by ``alpha``; output is not clamped.

    ``img`` may be a :class:`GrayImage`, an [H, W] array or Tensor; ``alpha`` a
    float or a 1-element Tensor (to differentiate with respect to it).
    """
    a = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray([alpha], dtype=np.float64))
    if np.any(a.data <= 0):
        raise ValueError(f"apply_contrast: alpha must be > 0, got {a.data.reshape(-1).tolist()}")
    t = _as_image_tensor(img)
    h, w = t.shape[-2:]
    if a.dtype != t.dtype and not isinstance(alpha, Tensor):
        a = Tensor(a.data.astype(t.dtype))
    out = _contrast_batch(dc.reshape(t, (1, 1, h, w)), dc.reshape(a, (1, 1)))
    return dc.reshape(out, (h, w))


def generate_views(img: Tensor, alphas: Tensor) -> Tensor:
    """img [1, H, W], alphas [K] -> K views [K, H, W], in gain order."""
    img = _as_image_tensor(img)
    alphas = alphas if isinstance(alphas, Tensor) else Tensor(np.asarray(alphas, dtype=img.dtype))
    if img.ndim != 3 or img.shape[0] != 1:
        raise dc.DimensionError(f"generate_views: expected [1, H, W], got {img.shape}")
    if alphas.ndim != 1 or alphas.shape[0] < 1:
        raise dc.DimensionError(f"generate_views: expected a non-empty gain vector, got {alphas.shape}")
    _, h, w = img.shape
    k = alphas.shape[0]
    out = _contrast_batch(dc.reshape(img, (1, 1, h, w)), dc.reshape(alphas, (1, k)))
    return dc.reshape(out, (k, h, w))


# ---------------------------------------------------------------------------
# gain predictor
# ---------------------------------------------------------------------------

PREDICTOR_LAYERS = ("conv1", "conv2")


@dataclass
class PredictorWeights:
    """Conv(1->8, s1) -> ReLU -> Conv(8->16, s2) -> ReLU -> GAP -> FC(16->K)."""

    params: dict[str, Tensor]

    @property
    def k(self) -> int:
        return self.params["fc.weight"].shape[0]

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def astype(self, dtype) -> "PredictorWeights":
        return PredictorWeights({n: Tensor(t.data.astype(dtype), requires_grad=True, name=n) for n, t in self.params.items()})


_PREDICTOR_SHAPES = {
    "conv1.weight": lambda k: (8, 1, 3, 3),
    "conv1.bias": lambda k: (8,),
    "conv2.weight": lambda k: (16, 8, 3, 3),
    "conv2.bias": lambda k: (16,),
    "fc.weight": lambda k: (k, 16),
    "fc.bias": lambda k: (k,),
}


def init_predictor(k: int, rng: np.random.Generator, dtype=np.float32) -> PredictorWeights:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases."""
    if k < 1:
        raise ValueError(f"predictor needs K >= 1, got {k}")
    params = {}
    for name, shape_fn in _PREDICTOR_SHAPES.items():
        shape = shape_fn(k)
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return PredictorWeights(params)


def zero_predictor(k: int, dtype=np.float32) -> PredictorWeights:
    return PredictorWeights(
        {n: Tensor(np.zeros(fn(k), dtype=dtype), requires_grad=True, name=n) for n, fn in _PREDICTOR_SHAPES.items()}
    )


def predict_raw(batch: Tensor, w: PredictorWeights, capture: dict | None = None) -> Tensor:
    """Unbounded gain scores [B, K] from local texture of a [B, 1, H, W] batch."""
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise dc.DimensionError(f"predict_raw: expected [B, 1, H, W], got {batch.shape}")
    if min(batch.shape[2:]) < MIN_SIDE:
        raise dc.DimensionError(f"predict_raw: spatial size {batch.shape[2:]} below {MIN_SIDE}")
    p = w.params
    h = dc.relu(dc.conv2d(batch, p["conv1.weight"], p["conv1.bias"], stride=1, padding=1))
    if capture is not None:
        capture["acam.conv1"] = h
    h = dc.relu(dc.conv2d(h, p["conv2.weight"], p["conv2.bias"], stride=2, padding=1))
    if capture is not None:
        capture["acam.conv2"] = h
    return dc.linear(dc.global_avg_pool(h), p["fc.weight"], p["fc.bias"])


def map_to_range(z: Tensor, range: RangeSpec = RangeSpec()) -> Tensor:
    """alpha = alpha_min + (alpha_max - alpha_min) * sigmoid(z), elementwise."""
    if not isinstance(range, RangeSpec):
        raise ValueError(f"map_to_range: expected a RangeSpec, got {range!r}")
    span = range.alpha_max - range.alpha_min
    s = dc.scale(dc.sigmoid(z), span)
    low = Tensor(np.full(z.shape, range.alpha_min, dtype=z.dtype))
    alpha = dc.add(s, low)
    # sigmoid saturates to exactly 1.0 in floating point for large z
    top = np.nextafter(z.dtype.type(range.alpha_max), z.dtype.type(range.alpha_min))
    bottom = np.nextafter(z.dtype.type(range.alpha_min), z.dtype.type(range.alpha_max))
    alpha.data = np.clip(alpha.data, bottom, top)
    return alpha


def acam_forward(
    batch: Tensor,
    w: PredictorWeights,
    range: RangeSpec = RangeSpec(),
    capture: dict | None = None,
) -> Tensor:
    """[B, 1, H, W] -> [B, K, H, W]: predict gains, map into range, generate views."""
    alphas = map_to_range(predict_raw(batch, w, capture), range)
    if capture is not None:
        capture["acam.alphas"] = alphas
    return _contrast_batch(batch, alphas)


def multiview_stack(img: GrayImage, w: PredictorWeights, range: RangeSpec = RangeSpec()) -> MultiViewStack:
    """Run the module on one image and package the result."""
    with dc.no_grad():
        x = Tensor(img.pixels.astype(w.params["fc.weight"].dtype)[None, None])
        alphas = map_to_range(predict_raw(x, w), range)
        views = _contrast_batch(x, alphas)
    return MultiViewStack(views.data[0], img.id, ContrastParams(alphas.data[0], range))
