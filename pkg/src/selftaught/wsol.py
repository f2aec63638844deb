"""Class activation maps and box extraction for support images."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .backbone import upsample
from .data import Box, LabeledImage

DEFAULT_TAU = 0.7
FALLBACK_FRACTION = 0.6


@dataclass
class ActivationMap:
    values: np.ndarray  # h x w, >= 0
    upsampled: np.ndarray  # H x W


@dataclass(frozen=True)
class ObjectBox:
    top: int
    left: int
    side: int

    @property
    def bottom(self) -> int:
        return self.top + self.side

    @property
    def right(self) -> int:
        return self.left + self.side

    def as_box(self) -> Box:
        return Box(self.top, self.left, self.bottom, self.right)

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.bottom), slice(self.left, self.right)


@dataclass
class FgBgPair:
    foreground: np.ndarray  # side x side x C copy of the box region
    background: np.ndarray  # H x W x C with the box region zeroed
    box: ObjectBox
    fallback: bool = False


def cam(fmap, image_size: int, weights=None) -> ActivationMap:
    """Channel-averaged (or ``weights``-weighted) activation, rectified and upsampled.

    ``fmap`` is D x h x w. With ``weights`` (length D) the map is
    ``relu(sum_d w_d fmap[d])``; the default is the plain channel mean.
    """
    f = torch.as_tensor(fmap).detach().to(torch.float64)
    if weights is None:
        raw = f.mean(0)
    else:
        w = torch.as_tensor(weights, dtype=torch.float64)
        raw = torch.einsum("d,dhw->hw", w, f)
    values = torch.relu(raw)
    up = upsample(values, image_size)
    return ActivationMap(values.numpy(), up.numpy())


def prototype_weights(prototype) -> np.ndarray:
    """Non-negative channel weights from a class prototype, normalised to sum 1."""
    p = np.maximum(np.asarray(prototype, dtype=np.float64), 0)
    s = p.sum()
    return p / s if s > 0 else np.full_like(p, 1.0 / len(p))


def auto_threshold(act: ActivationMap, tau: float = DEFAULT_TAU) -> np.ndarray:
    up = act.upsampled
    peak = up.max()
    if not peak > 0:
        return np.zeros(up.shape, dtype=bool)
    return up >= tau * peak


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Boolean mask of the largest 4-connected component (ties -> first in raster order)."""
    labels, n = ndimage.label(mask)
    if n == 0:
        raise ValueError("mask is empty")
    counts = np.bincount(labels.ravel())[1:]
    # ndimage numbers components by their first pixel in raster order, and
    # argmax returns the first maximum, which gives the raster tie-break.
    return labels == (int(np.argmax(counts)) + 1)


def tight_box(mask: np.ndarray) -> Box:
    rows = np.nonzero(mask.any(1))[0]
    cols = np.nonzero(mask.any(0))[0]
    return Box(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def square_box(box: Box, height: int, width: int) -> ObjectBox:
    """Expand to a square of side max(h, w) centred on ``box``, shifted inside the image."""
    side = min(max(box.height, box.width), height, width)
    top = box.top - (side - box.height) // 2
    left = box.left - (side - box.width) // 2
    top = min(max(top, 0), height - side)
    left = min(max(left, 0), width - side)
    return ObjectBox(int(top), int(left), int(side))


def largest_component_box(mask: np.ndarray) -> ObjectBox:
    mask = np.asarray(mask, dtype=bool)
    comp = largest_component(mask)
    return square_box(tight_box(comp), *mask.shape)


def fallback_box(size: int) -> ObjectBox:
    side = math.ceil(FALLBACK_FRACTION * size)
    top = (size - side) // 2
    return ObjectBox(top, top, side)


def split_fg_bg(image: LabeledImage | np.ndarray, box: ObjectBox | None) -> FgBgPair:
    pixels = image.pixels if isinstance(image, LabeledImage) else np.asarray(image)
    fallback = box is None
    if fallback:
        box = fallback_box(pixels.shape[0])
    sl = box.slices()
    fg = pixels[sl].copy()
    bg = pixels.copy()
    bg[sl] = 0
    return FgBgPair(fg, bg, box, fallback)


def recompose(pair: FgBgPair) -> np.ndarray:
    out = pair.background.copy()
    out[pair.box.slices()] = pair.foreground
    return out


def localize(fmap, image_size: int, tau: float = DEFAULT_TAU, weights=None) -> tuple[ActivationMap, ObjectBox | None]:
    """CAM -> threshold -> largest-component square box (``None`` when the map is empty)."""
    act = cam(fmap, image_size, weights)
    mask = auto_threshold(act, tau)
    return act, (largest_component_box(mask) if mask.any() else None)


def localize_batch(model, pixels: np.ndarray, tau: float = DEFAULT_TAU, class_weights=None):
    """Boxes for an N x 3 x H x W batch using ``model.feature_map`` without tracking gradients.

    ``class_weights`` optionally holds one channel-weight vector per image.
    """
    with torch.no_grad():
        fmaps = model.feature_map(torch.as_tensor(pixels))
    size = pixels.shape[-1]
    out = []
    for i in range(fmaps.shape[0]):
        w = None if class_weights is None else class_weights[i]
        out.append(localize(fmaps[i], size, tau, w))
    return out
