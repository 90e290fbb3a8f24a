"""Grad-CAM heatmaps over a named convolutional layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import diffcore as dc
from .backbones import Classifier, forward_classify
from .contrast import PREDICTOR_LAYERS, GrayImage, PredictorWeights, RangeSpec, acam_forward
from .diffcore import Tensor
from .train import model_logits


@dataclass
class Heatmap:
    values: np.ndarray  # [h, w], >= 0, max in {0, 1}
    layer_name: str
    target_class: int


def eligible_layers(classifier: Classifier, predictor: PredictorWeights | None = None,
                    include_acam: bool = True) -> list[str]:
    layers = []
    if predictor is not None and include_acam:
        layers += [f"acam.{n}" for n in PREDICTOR_LAYERS]
    return layers + classifier.spatial_layers()


def grad_cam(
    classifier: Classifier,
    image,
    target_class: int,
    layer: str | None = None,
    predictor: PredictorWeights | None = None,
    rng_spec: RangeSpec = RangeSpec(),
    include_acam: bool = True,
) -> Heatmap:
    """Gradient-weighted activation map for ``target_class`` at ``layer``.

    Channel weights are the spatial mean of d(logit)/d(activation); the map is
    ReLU of the weighted channel sum, scaled to max 1. ``layer`` defaults to the
    last backbone block. With ``include_acam=False`` the predicted gains are
    treated as constants, so only backbone layers can be targeted.
    """
    eligible = eligible_layers(classifier, predictor, include_acam)
    layer = layer or classifier.spatial_layers()[-1]
    if layer not in eligible:
        raise ValueError(f"layer {layer!r} is not a spatial conv layer; eligible layers: {', '.join(eligible)}")
    nc = classifier.config.num_classes
    if not 0 <= int(target_class) < nc:
        raise ValueError(f"target_class must lie in [0, {nc}), got {target_class}")

    px = image.pixels if isinstance(image, GrayImage) else np.asarray(image)
    dtype = classifier.params["head.weight"].dtype
    x = Tensor(px.astype(dtype)[None, None])

    capture: dict[str, Tensor] = {}
    if predictor is not None and not include_acam:
        with dc.no_grad():
            views = acam_forward(x, predictor, rng_spec)
        logits = forward_classify(classifier, Tensor(views.data), capture)
    else:
        logits = model_logits(classifier, predictor, x, rng_spec, capture)
    act = capture[layer]
    for t in capture.values():
        t.grad = None
    target = dc.tensor_sum(dc.mul(logits, Tensor(np.eye(nc, dtype=logits.dtype)[[int(target_class)]])))
    dc.backward(target)
    a = act.data[0].astype(np.float64)
    g = np.zeros_like(a) if act.grad is None else act.grad[0].astype(np.float64)
    weights = g.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, a, axes=(0, 0)), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return Heatmap(cam, layer, int(target_class))


def upsample(heatmap: Heatmap, height: int, width: int) -> np.ndarray:
    """Bilinear resize of the map to the input size, kept in [0, 1]."""
    v = heatmap.values
    zoom = (height / v.shape[0], width / v.shape[1])
    out = ndimage.zoom(v, zoom, order=1, mode="nearest", grid_mode=True)
    return np.clip(out, 0.0, 1.0)


def overlay_rgb(pixels: np.ndarray, heat: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Blend a jet-coloured heatmap over the grayscale image; uint8 RGB."""
    from matplotlib import colormaps

    rgb_heat = colormaps["jet"](heat)[..., :3]
    gray = np.repeat(np.clip(pixels, 0, 1)[..., None], 3, axis=2)
    mix = (1 - alpha) * gray + alpha * rgb_heat
    return np.rint(mix * 255).astype(np.uint8)


def heatmap_filename(image_id: str, target_class: int, layer: str, suffix: str) -> str:
    return f"{image_id}_class{target_class}_{layer.replace('.', '-')}{suffix}"
