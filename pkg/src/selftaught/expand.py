"""Expanded support set: rotated and background-exchanged object regions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .wsol import FgBgPair

ANGLES = (0, 90, 180, 270)


@dataclass
class ExpandedSample:
    pixels: np.ndarray
    class_label: int
    rotation_label: int
    source: int  # index of the foreground donor in the support set
    background: int  # index of the background donor
    angle: int
    kind: str = "original"  # original | self | exchange | whole


@dataclass
class ExpandedSupportSet:
    samples: list[ExpandedSample]
    by_class: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.by_class:
            for i, s in enumerate(self.samples):
                self.by_class.setdefault(s.class_label, []).append(i)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_classes(self) -> int:
        return len(self.by_class)

    def pixels(self, idx) -> np.ndarray:
        """N x 3 x H x W batch of the selected samples."""
        return np.ascontiguousarray(np.stack([self.samples[i].pixels for i in idx]).transpose(0, 3, 1, 2),
                                    dtype=np.float32)

    def variants(self) -> list[ExpandedSample]:
        return [s for s in self.samples if s.kind != "original"]


@dataclass
class ExpansionConfig:
    wsol_rot: bool = True
    wsol_exc_rot: bool = True
    whole_rot: bool = False
    g_self: int = 1
    g_exch: int = 3
    p_rc: float = 0.5

    @property
    def uses_wsol(self) -> bool:
        return self.wsol_rot or self.wsol_exc_rot


def rotate_patch(patch: np.ndarray, angle: int) -> np.ndarray:
    """Exact counter-clockwise rotation by a multiple of 90 degrees."""
    if patch.shape[0] != patch.shape[1]:
        raise ValueError(f"patch must be square, got {patch.shape[:2]}")
    if angle % 90:
        raise ValueError(f"angle must be a multiple of 90, got {angle}")
    return np.ascontiguousarray(np.rot90(patch, k=(angle // 90) % 4, axes=(0, 1)))


def resize_patch(patch: np.ndarray, side: int) -> np.ndarray:
    if patch.shape[0] == side:
        return patch
    t = torch.from_numpy(np.ascontiguousarray(patch.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)[0]
    return out.numpy().transpose(1, 2, 0).astype(patch.dtype)


def random_kernel(rng: np.random.Generator) -> np.ndarray:
    """3x3 kernel from i.i.d. normal draws, shifted to be non-negative and scaled to sum 1."""
    k = rng.normal(size=(3, 3))
    k = k - k.min()
    s = k.sum()
    return k / s if s > 0 else np.full((3, 3), 1 / 9)


def convolve_image(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.stack([ndimage.correlate(image[..., c].astype(np.float64), kernel, mode="reflect")
                    for c in range(image.shape[-1])], -1)
    return np.clip(out, 0, 1).astype(image.dtype)


def random_conv_smooth(image: np.ndarray, rng: np.random.Generator, p_rc: float = 0.5) -> np.ndarray:
    """With probability ``p_rc`` convolve every channel with one random mean-preserving 3x3 kernel."""
    apply = rng.random() < p_rc
    kernel = random_kernel(rng)
    if not apply:
        return image
    return convolve_image(image, kernel)


def compose(fg_donor: FgBgPair, bg_donor: FgBgPair, angle: int, rng: np.random.Generator,
            p_rc: float = 0.5) -> np.ndarray:
    """Rotated foreground of ``fg_donor`` stitched into ``bg_donor`` at its box, then smoothed."""
    patch = resize_patch(rotate_patch(fg_donor.foreground, angle), bg_donor.box.side)
    out = bg_donor.background.copy()
    out[bg_donor.box.slices()] = patch
    return random_conv_smooth(out, rng, p_rc)


def compose_sample(pairs: list[FgBgPair], labels, i: int, j: int, angle: int, rng, p_rc: float,
                   kind: str) -> ExpandedSample:
    pix = compose(pairs[i], pairs[j], angle, rng, p_rc)
    return ExpandedSample(pix, int(labels[i]), angle // 90, i, j, angle, kind)


def build_expanded_set(support, labels, pairs: list[FgBgPair] | None, config: ExpansionConfig,
                       rng: np.random.Generator) -> ExpandedSupportSet:
    """Originals plus self-rotations and background exchanges (or whole-image rotations).

    ``support`` is a sequence of H x W x 3 arrays (or objects with ``.pixels``),
    ``labels`` their episode-local classes, ``pairs`` one foreground/background
    split per support image (only needed for the WSOL-based variants).
    """
    imgs = [getattr(s, "pixels", s) for s in support]
    n = len(imgs)
    samples = [ExpandedSample(imgs[i], int(labels[i]), 0, i, i, 0) for i in range(n)]
    if config.uses_wsol and (pairs is None or len(pairs) != n):
        raise ValueError("one foreground/background pair per support sample is required")
    for i in range(n):
        if config.wsol_rot:
            for _ in range(config.g_self):
                angle = int(rng.choice(ANGLES[1:]))
                samples.append(compose_sample(pairs, labels, i, i, angle, rng, config.p_rc, "self"))
        if config.wsol_exc_rot and n > 1:
            for _ in range(config.g_exch):
                j = int(rng.integers(n - 1))
                j += j >= i
                angle = int(rng.choice(ANGLES))
                samples.append(compose_sample(pairs, labels, i, j, angle, rng, config.p_rc, "exchange"))
        if config.whole_rot:
            for _ in range(config.g_self):
                angle = int(rng.choice(ANGLES[1:]))
                samples.append(ExpandedSample(rotate_patch(imgs[i], angle), int(labels[i]), angle // 90,
                                              i, i, angle, "whole"))
    return ExpandedSupportSet(samples)
