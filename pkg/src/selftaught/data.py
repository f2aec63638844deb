"""Images, domains and episodic sampling.

Two sources of images are supported: a directory tree with one
sub-directory per class (``<root>/<class_name>/*.png|jpg``) and a
procedural shapes-on-texture generator whose texture family plays the role
of a visual domain.
"""
from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
DEFAULT_IMAGE_SIZE = 84
DATA_ROOT_ENV = "SELFTAUGHT_DATA_ROOT"


class ConfigError(RuntimeError):
    """Fatal configuration problem (missing dataset root, bad parameters)."""


class EpisodeSamplingError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, ``bottom``/``right`` exclusive."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def area(self) -> int:
        return max(self.height, 0) * max(self.width, 0)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    class_id: int
    gt_box: Box | None = None

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != p.shape[1] or p.shape[2] != 3:
            raise ValueError(f"expected square HxWx3 image, got shape {p.shape}")

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


class ImageCollection:
    """Images grouped by global class id. Treated as immutable after construction."""

    def __init__(self, groups: dict[int, list[LabeledImage]], class_names: dict[int, str] | None = None):
        self._groups = {int(k): list(v) for k, v in sorted(groups.items())}
        self.class_names = dict(class_names or {k: f"class_{k:03d}" for k in self._groups})

    @property
    def classes(self) -> list[int]:
        return list(self._groups)

    def __getitem__(self, class_id: int) -> list[LabeledImage]:
        return self._groups[class_id]

    def __len__(self) -> int:
        return len(self._groups)

    def __iter__(self) -> Iterator[int]:
        return iter(self._groups)

    def n_images(self) -> int:
        return sum(len(v) for v in self._groups.values())

    def images(self) -> Iterator[LabeledImage]:
        for v in self._groups.values():
            yield from v


@dataclass
class Episode:
    """One N-way K-shot task; labels are episode-local in ``[0, way)``."""

    support: list[LabeledImage]
    support_labels: np.ndarray
    query: list[LabeledImage]
    query_labels: np.ndarray
    way: int
    shot: int
    queries_per_class: int
    class_ids: list[int] = field(default_factory=list)  # local label -> global class id


@dataclass
class DomainSpec:
    """Where a domain's images come from.

    ``root`` is either a directory or ``None`` for the synthetic generator,
    in which case ``texture_family``/``seed`` select the procedural domain.
    ``classes`` restricts the domain to a subset of (global) class ids.
    """

    name: str
    root: str | Path | None = None
    split: str = "train"
    classes: Sequence[int] | None = None
    texture_family: str = "A"
    seed: int = 0
    images_per_class: int = 40
    image_size: int = DEFAULT_IMAGE_SIZE


# ---------------------------------------------------------------------------
# loading


def _resize(img, size: int) -> np.ndarray:
    from PIL import Image

    img = img.convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def load_directory(root: str | Path, image_size: int = DEFAULT_IMAGE_SIZE,
                   min_images: int = 1, classes: Sequence[str] | None = None) -> ImageCollection:
    """Load ``<root>/<class_name>/*`` into a collection.

    Class ids follow sorted class-directory order. Classes with fewer than
    ``min_images`` files are dropped with a warning.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root does not exist: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if classes is not None:
        wanted = set(classes)
        class_dirs = [p for p in class_dirs if p.name in wanted]
    groups: dict[int, list[LabeledImage]] = {}
    names: dict[int, str] = {}
    for cid, cdir in enumerate(class_dirs):
        files = sorted(f for f in cdir.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if len(files) < min_images:
            warnings.warn(f"class {cdir.name!r} has {len(files)} images (< {min_images}); excluded")
            continue
        imgs = []
        for f in files:
            with Image.open(f) as im:
                imgs.append(LabeledImage(_resize(im, image_size), cid))
        groups[cid] = imgs
        names[cid] = cdir.name
    return ImageCollection(groups, names)


def load_domain(spec: DomainSpec, min_images: int = 1) -> ImageCollection:
    """Resolve a :class:`DomainSpec` into an :class:`ImageCollection`."""
    if spec.root is None:
        classes = list(spec.classes) if spec.classes is not None else synthetic_split(spec.split)
        coll = generate_synthetic_domain(spec.seed, classes=classes,
                                         images_per_class=spec.images_per_class,
                                         texture_family=spec.texture_family,
                                         image_size=spec.image_size)
        if spec.images_per_class < min_images:
            warnings.warn(f"synthetic classes have {spec.images_per_class} images (< {min_images}); all excluded")
            return ImageCollection({})
        return coll
    root = Path(spec.root)
    if not root.is_absolute() and os.environ.get(DATA_ROOT_ENV):
        root = Path(os.environ[DATA_ROOT_ENV]) / root
    if (root / spec.split).is_dir():
        root = root / spec.split
    names = None if spec.classes is None else [str(c) for c in spec.classes]
    return load_directory(root, spec.image_size, min_images, names)


# ---------------------------------------------------------------------------
# episodes


def sample_episode(collection: ImageCollection, way: int, shot: int, queries_per_class: int,
                   rng_seed: int | Sequence[int] | np.random.Generator) -> Episode:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    need = shot + queries_per_class
    if len(collection) < way:
        raise EpisodeSamplingError(f"{way}-way episode needs {way} classes, collection has {len(collection)}")
    for c in collection.classes:
        if len(collection[c]) < need:
            raise EpisodeSamplingError(
                f"class {collection.class_names.get(c, c)!r} has {len(collection[c])} images, "
                f"need {need} (shot={shot} + queries={queries_per_class})")
    chosen = rng.choice(np.asarray(collection.classes), size=way, replace=False)
    support, query, s_lab, q_lab = [], [], [], []
    for local, cid in enumerate(chosen.tolist()):
        members = collection[cid]
        idx = rng.choice(len(members), size=need, replace=False)
        support += [members[i] for i in idx[:shot]]
        query += [members[i] for i in idx[shot:]]
        s_lab += [local] * shot
        q_lab += [local] * queries_per_class
    return Episode(support, np.asarray(s_lab, dtype=np.int64), query, np.asarray(q_lab, dtype=np.int64),
                   way, shot, queries_per_class, chosen.tolist())


def stack_pixels(images: Sequence[LabeledImage] | Sequence[np.ndarray]) -> np.ndarray:
    """N x 3 x H x W float32 batch."""
    arrs = [im.pixels if isinstance(im, LabeledImage) else im for im in images]
    return np.ascontiguousarray(np.stack(arrs).transpose(0, 3, 1, 2), dtype=np.float32)


# ---------------------------------------------------------------------------
# synthetic shapes-on-texture domains

# Shape predicates on normalised coordinates (u right, v down), object roughly in [-1, 1]^2.
def _poly(n, phase=0.0):
    ang = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([np.sin(ang), -np.cos(ang)], 1)


def _in_polygon(u, v, verts):
    inside = np.zeros(u.shape, bool)
    n = len(verts)
    for k in range(n):
        x1, y1 = verts[k]
        x2, y2 = verts[(k + 1) % n]
        cond = (y1 > v) != (y2 > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x2 - x1) * (v - y1) / (y2 - y1) + x1
        inside ^= cond & (u < xint)
    return inside


def _star(n, inner):
    outer = _poly(n)
    mid = _poly(n, np.pi / n) * inner
    return np.stack([outer, mid], 1).reshape(-1, 2)


SHAPES = {
    "circle": lambda u, v: u * u + v * v <= 1,
    "ring": lambda u, v: (u * u + v * v <= 1) & (u * u + v * v >= 0.45),
    "triangle": lambda u, v: _in_polygon(u, v, _poly(3) * [1.15, 1.0] + [0, 0.2]),
    "square": lambda u, v: (abs(u) <= 0.85) & (abs(v) <= 0.85),
    "diamond": lambda u, v: abs(u) + abs(v) <= 1,
    "plus": lambda u, v: ((abs(u) <= 0.3) & (abs(v) <= 1)) | ((abs(v) <= 0.3) & (abs(u) <= 1)),
    "x_cross": lambda u, v: (((abs(u - v) <= 0.4) | (abs(u + v) <= 0.4)) & (abs(u) <= 0.8) & (abs(v) <= 0.8)),
    "star": lambda u, v: _in_polygon(u, v, _star(5, 0.45)),
    "hexagon": lambda u, v: _in_polygon(u, v, _poly(6, np.pi / 6)),
    "crescent": lambda u, v: (u * u + v * v <= 1) & ((u - 0.45) ** 2 + v * v >= 0.6),
    "semicircle": lambda u, v: (u * u + v * v <= 1) & (v >= -0.1),
    "l_shape": lambda u, v: ((abs(u + 0.6) <= 0.3) & (abs(v) <= 1)) | ((abs(v - 0.7) <= 0.3) & (abs(u) <= 0.9)),
    "t_shape": lambda u, v: ((abs(v + 0.7) <= 0.3) & (abs(u) <= 1)) | ((abs(u) <= 0.3) & (abs(v) <= 1)),
    "arrow": lambda u, v: _in_polygon(u, v, np.array(
        [[0, -1], [0.9, 0], [0.35, 0], [0.35, 1], [-0.35, 1], [-0.35, 0], [-0.9, 0]])),
    "bar": lambda u, v: (abs(u) <= 1) & (abs(v) <= 0.35),
    "frame": lambda u, v: (np.maximum(abs(u), abs(v)) <= 0.9) & (np.maximum(abs(u), abs(v)) >= 0.5),
    "hourglass": lambda u, v: (abs(u) <= abs(v) + 0.1) & (abs(v) <= 0.95),
    "u_shape": lambda u, v: (((abs(u) >= 0.4) & (abs(u) <= 0.9)) | (v >= 0.45)) & (abs(u) <= 0.9) & (abs(v) <= 0.9),
    "star4": lambda u, v: _in_polygon(u, v, _star(4, 0.35)),
    "chevron": lambda u, v: (abs(v + 0.8 * abs(u) - 0.3) <= 0.35) & (abs(u) <= 1),
    "dumbbell": lambda u, v: ((u + 0.6) ** 2 + v * v <= 0.16) | ((u - 0.6) ** 2 + v * v <= 0.16)
    | ((abs(u) <= 0.6) & (abs(v) <= 0.12)),
    "pentagon": lambda u, v: _in_polygon(u, v, _poly(5)),
}
N_GLYPHS = 78


def _glyph(index: int):
    """Closed star-shaped outline r <= R(theta) from a few random harmonics; fixed per glyph index."""
    rng = np.random.default_rng([0x61F, index])
    ks = np.arange(2, 6)
    amp = rng.uniform(0.0, 0.22, len(ks))
    phase = rng.uniform(0, 2 * np.pi, len(ks))
    hole = rng.uniform(0.25, 0.45) if rng.random() < 0.3 else 0.0

    def pred(u, v):
        r, th = np.hypot(u, v), np.arctan2(v, u)
        edge = 0.72 + (amp[:, None, None] * np.cos(ks[:, None, None] * th + phase[:, None, None])).sum(0)
        return (r <= np.clip(edge, 0.25, 1.0)) & (r >= hole)

    return pred


for _g in range(N_GLYPHS):
    SHAPES[f"glyph{_g:02d}"] = _glyph(_g)
SHAPE_NAMES = list(SHAPES)
_N_NAMED = len(SHAPE_NAMES) - N_GLYPHS

# Default class-id splits of the synthetic world (ids index SHAPE_NAMES): named shapes and
# procedural glyphs both appear in every split, with no class shared between splits.
SYNTH_SPLITS = {
    "train": list(range(0, 12)) + list(range(_N_NAMED, _N_NAMED + 58)),
    "val": list(range(12, 16)) + [21] + list(range(_N_NAMED + 58, _N_NAMED + 63)),
    "test": list(range(16, 21)) + list(range(_N_NAMED + 63, _N_NAMED + N_GLYPHS)),
}

TEXTURE_FAMILIES = ("A", "B", "C", "D")
# Fraction of images whose background colours come from a palette tied to the
# class. The source family mimics natural photos, where context correlates
# with the object; the other families draw backgrounds independently.
BACKGROUND_BIAS = {"A": 0.8, "B": 0.0, "C": 0.0, "D": 0.0}


def synthetic_split(split: str) -> list[int]:
    try:
        return SYNTH_SPLITS[split]
    except KeyError:
        raise ConfigError(f"unknown split {split!r}; expected one of {sorted(SYNTH_SPLITS)}") from None


def _smooth_noise(rng, size, cells):
    """Bilinearly upsampled uniform noise, values in [0, 1]."""
    grid = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size, endpoint=False) + 0.5 * cells / size
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    rows = grid[i] * (1 - f)[:, None] + grid[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def _class_palette(class_id: int) -> np.ndarray:
    return np.random.default_rng([0xB6, class_id]).random((2, 3))


def _texture(rng, family: str, size: int, colours: np.ndarray | None = None) -> np.ndarray:
    c1, c2 = (rng.random(3), rng.random(3)) if colours is None else colours
    yy, xx = np.mgrid[0:size, 0:size] / size
    if family == "A":  # soft colour blotches
        w = _smooth_noise(rng, size, int(rng.integers(3, 6)))
    elif family == "B":  # oriented stripes
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(4, 9)
        w = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 6.3))
    elif family == "C":  # checkerboard
        n = int(rng.integers(4, 9))
        w = ((np.floor(xx * n) + np.floor(yy * n)) % 2).astype(float)
    elif family == "D":  # fine speckle
        w = rng.random((size, size))
    else:
        raise ConfigError(f"unknown texture family {family!r}; expected one of {TEXTURE_FAMILIES}")
    img = c1[None, None, :] * (1 - w[..., None]) + c2[None, None, :] * w[..., None]
    img += rng.normal(0, 0.03, img.shape)
    # backgrounds stay in the upper part of the range so dark shapes keep their contrast
    return 0.35 + 0.65 * img


def _draw_shape(rng, kind: str, size: int, area_range=(0.04, 0.60)):
    """Shape mask, fill colour and tight box. Uses only ``rng`` (the geometry stream)."""
    pred = SHAPES[kind]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(100):
        scale = rng.uniform(0.16, 0.36) * size
        ang = np.deg2rad(rng.uniform(-12, 12))
        cx, cy = rng.uniform(scale, size - scale, 2)
        du, dv = (xx - cx) / scale, (yy - cy) / scale
        u = np.cos(ang) * du + np.sin(ang) * dv
        v = -np.sin(ang) * du + np.cos(ang) * dv
        mask = pred(u, v)
        if not mask.any():
            continue
        rows, cols = np.nonzero(mask.any(1))[0], np.nonzero(mask.any(0))[0]
        box = Box(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)
        if area_range[0] <= box.area / size ** 2 <= area_range[1]:
            break
    else:  # pragma: no cover - scale range makes this unreachable
        raise RuntimeError(f"could not place shape {kind}")
    colour = 0.25 * rng.random(3)  # dark fill of random hue, independent of the class
    shade = rng.uniform(0.85, 1.0)
    return mask, colour, shade, box


def generate_synthetic_domain(seed: int, n_classes: int | None = None, images_per_class: int = 40,
                              texture_family: str = "A", image_size: int = DEFAULT_IMAGE_SIZE,
                              classes: Sequence[int] | None = None,
                              background_bias: float | None = None) -> ImageCollection:
    """Shapes on textured backgrounds.

    The class of an image is its shape kind; position, scale, small tilt
    and the hue of the dark fill vary per image, and backgrounds are kept
    lighter than any fill. Geometry is drawn from a stream keyed by
    ``(seed, class, index)`` only, so two texture families with the same
    seed share every shape and differ only in their backgrounds.

    With probability ``background_bias`` (default: ``BACKGROUND_BIAS`` of the
    family) an image's two background colours are jittered copies of a
    palette fixed per class, so context carries class information.
    """
    if classes is None:
        if n_classes is None or n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        classes = range(n_classes)
    classes = list(classes)
    if len(classes) < 2:
        raise ValueError("n_classes must be >= 2")
    if max(classes) >= len(SHAPES) or min(classes) < 0:
        raise ValueError(f"synthetic class ids must be in [0, {len(SHAPES)})")
    if texture_family not in TEXTURE_FAMILIES:
        raise ConfigError(f"unknown texture family {texture_family!r}; expected one of {TEXTURE_FAMILIES}")
    bias = BACKGROUND_BIAS[texture_family] if background_bias is None else background_bias
    if not 0 <= bias <= 1:
        raise ValueError("background_bias must lie in [0, 1]")
    fam_key = TEXTURE_FAMILIES.index(texture_family)
    groups: dict[int, list[LabeledImage]] = {}
    for cid in classes:
        kind = SHAPE_NAMES[cid]
        palette = _class_palette(cid)
        imgs = []
        for n in range(images_per_class):
            geo = np.random.default_rng([seed, cid, n, 0])
            tex = np.random.default_rng([seed, cid, n, 1 + fam_key])
            ctx = np.random.default_rng([seed, cid, n, 16 + fam_key])
            mask, colour, shade, box = _draw_shape(geo, kind, image_size)
            colours = None
            if ctx.random() < bias:
                colours = np.clip(palette + ctx.normal(0, 0.08, palette.shape), 0, 1)
            img = _texture(tex, texture_family, image_size, colours)
            fill = colour * shade + geo.normal(0, 0.02, (image_size, image_size, 3))
            img = np.where(mask[..., None], fill, img)
            imgs.append(LabeledImage(np.clip(img, 0, 1).astype(np.float32), cid, box))
        groups[cid] = imgs
    return ImageCollection(groups, {c: SHAPE_NAMES[c] for c in classes})


def export_collection(collection: ImageCollection, out_dir: str | Path) -> Path:
    """Write ``<out>/<class_name>/<n>.png`` plus a ``boxes.json`` with ground-truth boxes."""
    from PIL import Image

    out = Path(out_dir)
    boxes = {}
    for cid in collection:
        name = collection.class_names.get(cid, str(cid))
        cdir = out / name
        cdir.mkdir(parents=True, exist_ok=True)
        for n, im in enumerate(collection[cid]):
            fname = f"{n:04d}.png"
            Image.fromarray(np.round(im.pixels * 255).astype(np.uint8)).save(cdir / fname)
            if im.gt_box is not None:
                b = im.gt_box
                boxes[f"{name}/{fname}"] = [b.top, b.left, b.bottom, b.right]
    (out / "boxes.json").write_text(json.dumps(boxes, indent=1))
    return out


def box_iou(a: Box, b: Box) -> float:
    t, l = max(a.top, b.top), max(a.left, b.left)
    bt, r = min(a.bottom, b.bottom), min(a.right, b.right)
    inter = max(bt - t, 0) * max(r - l, 0)
    union = a.area + b.area - inter
    return inter / union if union else 0.0



def resolve_domain(name: str, split: str, image_size: int = DEFAULT_IMAGE_SIZE, images_per_class: int = 40,
                   seed: int = 0, min_images: int = 1) -> ImageCollection:
    """``synthA`` .. ``synthD`` select a synthetic texture family; anything else is a dataset directory
    (relative paths are looked up under ``$SELFTAUGHT_DATA_ROOT`` when set)."""
    if name.startswith("synth") and name[5:] in TEXTURE_FAMILIES:
        spec = DomainSpec(name, None, split, texture_family=name[5:], seed=seed,
                          images_per_class=images_per_class, image_size=image_size)
    else:
        spec = DomainSpec(name, name, split, image_size=image_size)
    return load_domain(spec, min_images)
