"""Class-discriminative localization maps and overlay rendering.

The raw map is the ReLU of activation maps at a tapped layer, each weighted
by the spatial average of the class logit's gradient with respect to that
map. Gradients are taken on the pre-softmax logit: past a saturated softmax
the probability gradient vanishes while the logit's does not. Maps are
normalized to [0, 1] before bilinear upsampling, painted with an analytic
jet approximation, and blended over the grayscale input.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import ops
from .backbone import Model
from .data import CLASS_NAMES
from .resample import bilinear_resize
from .tensor import Tensor, backward


@dataclass(frozen=True)
class GradCamConfig:
    tap: str = "final_feature_map"  # pre-attention feature map
    class_selection: str | int = "predicted"
    output_side: int | None = None  # defaults to the model input side
    opacity: float = 0.45

    def __post_init__(self):
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity must be in [0, 1], got {self.opacity}")


@dataclass
class Heatmap:
    raw: np.ndarray         # (h, w), nonnegative
    normalized: np.ndarray  # (h, w) in [0, 1]
    upsampled: np.ndarray   # (S, S) in [0, 1]


def compute_gradcam(model: Model, image: np.ndarray, class_index: int,
                    config: GradCamConfig = GradCamConfig()) -> np.ndarray:
    """Raw localization map for one image and class at the tapped layer."""
    k = model.head.classes
    if not 0 <= class_index < k:
        raise ValueError(f"class index {class_index} out of range [0, {k})")
    batch = Tensor(np.asarray(image, dtype=np.float64)[None, ...])
    probs, taps = model.forward(batch, "infer", retain_tap_grads=True)
    if config.tap not in taps:
        raise KeyError(f"unknown tap {config.tap!r}; available: {sorted(taps)}")
    tap = taps[config.tap]
    logits = taps["logits"]

    one_hot = np.zeros((1, k))
    one_hot[0, class_index] = 1.0
    score = ops.total_sum(ops.mul(logits, Tensor(one_hot)))
    backward(score)
    if tap.grad is None:
        return np.zeros(tap.data.shape[1:3])

    alphas = tap.grad.mean(axis=(1, 2))  # (1, C): pooled gradient per map
    weighted = (tap.data * alphas[:, None, None, :]).sum(axis=-1)
    return np.maximum(weighted[0], 0.0)


def predicted_class(model: Model, image: np.ndarray) -> int:
    probs, _ = model.forward(Tensor(np.asarray(image)[None, ...]), "infer")
    return int(np.argmax(probs.data[0]))


def normalize_heatmap(raw: np.ndarray) -> np.ndarray:
    """(x - min) / (max - min); a flat map (including all-zero) maps to zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("raw heatmaps are nonnegative by construction")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def jet_rgb(v: np.ndarray) -> np.ndarray:
    """Analytic jet colormap; v is clamped to [0, 1], output channels-last."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def overlay(gray: np.ndarray, heat: np.ndarray, opacity: float = 0.45) -> np.ndarray:
    """Blend the colored heatmap over a grayscale image, per pixel per channel."""
    gray = np.asarray(gray, dtype=np.float64)
    heat = np.asarray(heat, dtype=np.float64)
    if gray.shape != heat.shape:
        raise ValueError(f"image and heatmap shapes differ: {gray.shape} vs {heat.shape}")
    return (1.0 - opacity) * gray[..., None] + opacity * jet_rgb(heat)


def make_heatmap(model: Model, image: np.ndarray, class_index: int,
                 config: GradCamConfig = GradCamConfig()) -> Heatmap:
    raw = compute_gradcam(model, image, class_index, config)
    normalized = normalize_heatmap(raw)
    side = config.output_side or model.backbone.input_side
    upsampled = np.clip(bilinear_resize(normalized, side, side), 0.0, 1.0)
    return Heatmap(raw=raw, normalized=normalized, upsampled=upsampled)


def _to_png(path, array):
    quantized = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(quantized).save(path, format="PNG")


def render_triptych(model: Model, image: np.ndarray, source_name: str, out_dir,
                    config: GradCamConfig = GradCamConfig()) -> Path:
    """Write original | heatmap | overlay side by side as one PNG.

    The filename carries the source image stem, the predicted class, and the
    explained class.
    """
    pred = predicted_class(model, image)
    explained = pred if config.class_selection == "predicted" else int(config.class_selection)
    heatmap = make_heatmap(model, image, explained, config)
    gray = np.asarray(image, dtype=np.float64).mean(axis=-1)
    side = config.output_side or model.backbone.input_side
    if gray.shape != (side, side):
        gray = np.clip(bilinear_resize(gray, side, side), 0.0, 1.0)
    panels = np.concatenate([
        np.repeat(gray[..., None], 3, axis=-1),
        np.repeat(heatmap.upsampled[..., None], 3, axis=-1),
        overlay(gray, heatmap.upsampled, config.opacity),
    ], axis=1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(source_name).stem
    path = out_dir / f"{stem}_pred-{CLASS_NAMES[pred]}_explained-{CLASS_NAMES[explained]}.png"
    _to_png(path, panels)
    return path


def heatmap_mass_inside_box(heatmap: np.ndarray, box: tuple[int, int, int, int]) -> float:
    """Fraction of total map mass inside a half-open (row0, col0, row1, col1) box."""
    total = heatmap.sum()
    if total == 0:
        return 0.0
    y0, x0, y1, x1 = box
    return float(heatmap[y0:y1, x0:x1].sum() / total)
