"""Filter grids, per-layer feature maps and guided-backprop saliency."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ModelSpec, Parameters, ReluHook, model_backward, model_forward
from .tensor import ParameterError

CHANNEL_NAMES = ("R", "G", "B")


class RenderError(ValueError):
    pass


def render_grayscale(values: np.ndarray) -> np.ndarray:
    """Min-max map to uint8 with round-half-up. A constant map renders as 128."""
    a = np.asarray(values, dtype=np.float64)
    if not np.isfinite(a).all():
        raise RenderError("cannot render a map containing NaN or Inf")
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full(a.shape, 128, dtype=np.uint8)
    scaled = (a - lo) * (255.0 / (hi - lo))
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


@dataclass
class FilterImage:
    layer: int
    filter: int
    channel: int
    weights: np.ndarray  # k x k
    image: np.ndarray  # uint8 k x k

    @property
    def channel_name(self) -> str:
        return CHANNEL_NAMES[self.channel] if self.layer == 1 and self.channel < 3 \
            else str(self.channel)


def _check_layer(layer: int):
    if layer not in (1, 2, 3, 4):
        raise ParameterError(f"layer must be a conv layer 1..4, got {layer}")


def visualize_filters(params: Parameters, layer: int = 1, n: int = 6) -> list:
    """One rendered plane per (filter, input channel) for the first ``n`` filters."""
    _check_layer(layer)
    w = params[f"conv{layer}.weight"]
    if not 1 <= n <= w.shape[0]:
        raise ParameterError(f"n must be in 1..{w.shape[0]} for layer {layer}, got {n}")
    return [FilterImage(layer, f, c, w[f, c].copy(), render_grayscale(w[f, c]))
            for f in range(n) for c in range(w.shape[1])]


def filter_grid(images: list, cell: int = 24, gap: int = 2) -> np.ndarray:
    """Tile filter cells into rows = filters, columns = channels (nearest-neighbour upscale)."""
    rows = max(im.filter for im in images) + 1
    cols = max(im.channel for im in images) + 1
    grid = np.full((rows * (cell + gap) - gap, cols * (cell + gap) - gap), 255, dtype=np.uint8)
    for im in images:
        k = im.image.shape[0]
        rep = np.repeat(np.repeat(im.image, -(-cell // k), axis=0), -(-cell // k), axis=1)
        r, c = im.filter * (cell + gap), im.channel * (cell + gap)
        grid[r:r + cell, c:c + cell] = rep[:cell, :cell]
    return grid


@dataclass
class FeatureMapSet:
    layer: int
    maps: np.ndarray  # n x H x W, post-ReLU pre-pool
    images: np.ndarray  # n x H x W uint8


def feature_maps(spec: ModelSpec, params: Parameters, x: np.ndarray, layer: int,
                 n: int = 6) -> FeatureMapSet:
    _check_layer(layer)
    filters = spec.filters[layer - 1]
    if not 1 <= n <= filters:
        raise ParameterError(f"n must be in 1..{filters} for layer {layer}, got {n}")
    acts = model_forward(spec, params, x, "eval").conv_acts[layer - 1][0, :n]
    return FeatureMapSet(layer, acts, np.stack([render_grayscale(m) for m in acts]))


@dataclass
class SaliencyMap:
    values: np.ndarray  # H x W, >= 0
    image: np.ndarray
    target_class: int


def guided_backprop(spec: ModelSpec, params: Parameters, x: np.ndarray, target_class: int,
                    relu_hook: Optional[ReluHook] = None) -> SaliencyMap:
    """Guided-backprop saliency for one C x H x W input.

    The backward pass is seeded with a one-hot on the target logit; the result
    is the per-pixel max over channels of the absolute input gradient.
    """
    if not 0 <= target_class < spec.num_classes:
        raise ParameterError(f"class must be in 0..{spec.num_classes - 1}, got {target_class}")
    trace = model_forward(spec, params, x, "eval")
    seed = np.zeros_like(trace.logits)
    seed[..., target_class] = 1
    _, dx = model_backward(spec, params, trace, seed, guided=True, weight_grads=False,
                           relu_hook=relu_hook)
    values = np.abs(dx).max(axis=-3)
    return SaliencyMap(values, render_grayscale(values), target_class)
