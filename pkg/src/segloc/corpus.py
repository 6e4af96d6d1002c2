"""Foreground/background corpora and a procedural pseudo-x-ray toy corpus."""
from __future__ import annotations

import colorsys
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorpusInvalidError, EmptyRegionError, IngestError, InvalidArgumentError
from .raster import (
    BBox,
    mask_bbox,
    read_mask,
    read_rgb,
    to_uint8,
    tighten,
    write_mask,
    write_rgb,
)
from .synth import authentic_region

log = logging.getLogger(__name__)

INSTANCES_FILE = "instances.json"
CLASSES_FILE = "classes.json"
REGIONS_FILE = "regions.json"
MAX_CLASSES = 64

TOY_SHAPES = ("rod", "disc", "lshape", "ring", "cross", "wedge")


@dataclass(frozen=True)
class ClassRegistry:
    names: tuple[str, ...]

    def __post_init__(self):
        if not 1 <= len(self.names) <= MAX_CLASSES:
            raise InvalidArgumentError(f"class count must lie in [1, {MAX_CLASSES}], got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise InvalidArgumentError("class names must be unique")

    @property
    def C(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise IngestError(f"unknown class label {name!r}") from None

    @classmethod
    def load(cls, path) -> "ClassRegistry":
        with open(path) as f:
            return cls(tuple(json.load(f)))


@dataclass(frozen=True, eq=False)
class Segment:
    class_id: int
    crop: np.ndarray
    mask: np.ndarray
    source_id: str


@dataclass
class ForegroundCorpus:
    registry: ClassRegistry
    instances: list[Segment]
    skipped: int = 0
    by_class: dict[int, list[Segment]] = field(init=False, repr=False)
    by_id: dict[str, Segment] = field(init=False, repr=False)

    def __post_init__(self):
        self.by_class = {c: [] for c in range(self.registry.C)}
        for seg in self.instances:
            self.by_class[seg.class_id].append(seg)
        self.by_id = {seg.source_id: seg for seg in self.instances}
        short = [self.registry.names[c] for c, segs in self.by_class.items() if len(segs) < 2]
        if short:
            raise CorpusInvalidError(f"classes with fewer than 2 instances: {', '.join(short)}")


class BackgroundCorpus:
    """Background image references plus (optionally cached) authentic regions.

    Images are loaded lazily and memoized; regions not present in the cache
    are computed on first use. Images without an authentic region raise
    EmptyRegionError from ``region``.
    """

    def __init__(self, paths: list[Path], regions: dict[str, BBox] | None = None, excluded: int = 0):
        if not paths:
            raise IngestError("background corpus is empty")
        self.paths = list(paths)
        self.regions = regions
        self.excluded = excluded
        self._images: dict[int, np.ndarray] = {}
        self._computed: dict[int, BBox | None] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.paths)

    def background_id(self, i: int) -> str:
        return self.paths[i].name

    def index_of(self, background_id: str) -> int:
        for i, p in enumerate(self.paths):
            if p.name == background_id:
                return i
        raise KeyError(background_id)

    def image(self, i: int) -> np.ndarray:
        img = self._images.get(i)
        if img is None:
            img = read_rgb(self.paths[i])
            img.setflags(write=False)
            with self._lock:
                self._images[i] = img
        return img

    def region(self, i: int) -> BBox:
        if self.regions is not None and self.background_id(i) in self.regions:
            return self.regions[self.background_id(i)]
        if i not in self._computed:
            try:
                box = authentic_region(self.image(i))
            except EmptyRegionError:
                box = None
            with self._lock:
                self._computed[i] = box
        box = self._computed[i]
        if box is None:
            raise EmptyRegionError(f"background {self.background_id(i)} has no authentic region")
        return box


def load_registry(root) -> ClassRegistry:
    path = Path(root) / CLASSES_FILE
    if not path.exists():
        raise IngestError(f"missing class registry {path}")
    return ClassRegistry.load(path)


def load_foregrounds(root, registry: ClassRegistry | None = None) -> ForegroundCorpus:
    root = Path(root)
    if registry is None:
        registry = load_registry(root)
    manifest = root / INSTANCES_FILE
    if not manifest.exists():
        raise IngestError(f"missing annotation manifest {manifest}")
    with open(manifest) as f:
        records = json.load(f)

    segments = []
    skipped = 0
    for i, rec in enumerate(records):
        try:
            class_id = registry.index(rec["class"])
            image_rel, mask_rel = rec["image"], rec["mask"]
        except KeyError as exc:
            raise IngestError(f"instance {i}: missing field {exc}") from None
        img = read_rgb(root / image_rel)
        mask = read_mask(root / mask_rel)
        if mask.shape != img.shape[:2]:
            raise IngestError(f"instance {i}: mask {mask_rel} does not match image {image_rel}")
        if not mask.any():
            skipped += 1
            continue
        crop_img, crop_mask = tighten(img, mask)
        segments.append(Segment(class_id, crop_img, crop_mask, f"{i}:{mask_rel}"))
    if skipped:
        log.warning("skipped %d instances with empty masks", skipped)
    return ForegroundCorpus(registry, segments, skipped)


def load_backgrounds(root, precompute_regions: bool = True) -> BackgroundCorpus:
    """List background PNGs; with ``precompute_regions`` also resolve every region.

    An existing ``regions.json`` is reused (after a bounds check); otherwise
    regions are computed and the cache is written. Images without an
    authentic region are dropped and counted in ``excluded``.
    """
    root = Path(root)
    paths = sorted(p for p in root.glob("*.png") if p.is_file()) if root.is_dir() else []
    if not paths:
        raise IngestError(f"no background images in {root}")
    if not precompute_regions:
        return BackgroundCorpus(paths)

    cache_path = root / REGIONS_FILE
    cached: dict[str, BBox] = {}
    if cache_path.exists():
        with open(cache_path) as f:
            cached = {k: BBox.from_list(v) for k, v in json.load(f).items()}

    regions: dict[str, BBox] = {}
    kept = []
    for p in paths:
        box = cached.get(p.name)
        if box is not None:
            img = read_rgb(p)
            if not box.inside(img.shape[1], img.shape[0]):
                raise IngestError(f"cached region {box.as_list()} invalid for {p.name}")
        else:
            try:
                box = authentic_region(read_rgb(p))
            except EmptyRegionError:
                continue
        regions[p.name] = box
        kept.append(p)

    excluded = len(paths) - len(kept)
    if regions != cached:
        with open(cache_path, "w") as f:
            json.dump({k: v.as_list() for k, v in regions.items()}, f, indent=1, sort_keys=True)
    if not kept:
        raise IngestError(f"every background in {root} lacks an authentic region")
    return BackgroundCorpus(kept, regions, excluded)


# --- toy corpus -------------------------------------------------------------


def _rounded_rect(h, w, x0, y0, x1, y1, r):
    yy, xx = np.mgrid[0:h, 0:w]
    inside = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
    cx = np.clip(xx, x0 + r, x1 - 1 - r)
    cy = np.clip(yy, y0 + r, y1 - 1 - r)
    return inside & ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r)


def toy_background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.integers(243, 256)
    img = base + rng.normal(0.0, 3.0, (size, size, 1)) + rng.normal(0.0, 1.0, (size, size, 3))
    img = np.clip(img, 235, 255)

    n_containers = int(rng.integers(1, 4))
    for k in range(n_containers):
        # the first container is large enough to keep the region >= 25% after erosion
        lo, hi = (0.68, 0.9) if k == 0 else (0.2, 0.5)
        w = int(size * rng.uniform(lo, hi))
        h = int(size * rng.uniform(lo, hi))
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        r = int(rng.integers(1, max(2, min(w, h) // 5)))
        shape = _rounded_rect(size, size, x0, y0, x0 + w, y0 + h, r)
        hue = rng.choice([0.08, 0.3, 0.58])
        color = np.array(colorsys.hsv_to_rgb(hue + rng.uniform(-0.03, 0.03), rng.uniform(0.15, 0.35), rng.uniform(0.45, 0.65))) * 255
        alpha = rng.uniform(0.65, 0.85)
        texture = rng.normal(0.0, 6.0, (size, size, 1))
        filled = (1 - alpha) * img + alpha * (color + texture)
        img = np.where(shape[..., None], filled, img)
    return to_uint8(img)


def _toy_shape(kind: str, rng: np.random.Generator, side: int) -> np.ndarray:
    """Binary mask of one toy object on a ``side x side`` canvas (before padding)."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2.0
    t = max(2, int(round(side * rng.uniform(0.22, 0.32))))
    if kind == "rod":
        length = int(side * rng.uniform(0.8, 1.0))
        m = (np.abs(yy - c) < t / 2.0) & (xx < length)
    elif kind == "disc":
        m = (xx - c) ** 2 + (yy - c) ** 2 <= (side / 2.0) ** 2
    elif kind == "lshape":
        m = (xx < t) | (yy >= side - t)
    elif kind == "ring":
        d2 = (xx - c) ** 2 + (yy - c) ** 2
        outer = side / 2.0
        m = (d2 <= outer**2) & (d2 >= (outer - t) ** 2)
    elif kind == "cross":
        m = (np.abs(xx - c) < t / 2.0) | (np.abs(yy - c) < t / 2.0)
    elif kind == "wedge":
        m = xx <= yy * rng.uniform(0.7, 1.0)
    else:
        raise InvalidArgumentError(f"unknown toy shape {kind!r}")
    return m


def toy_foreground(rng: np.random.Generator, class_id: int, C: int, size: int):
    kind = TOY_SHAPES[class_id % len(TOY_SHAPES)]
    side = int(size * rng.uniform(0.25, 0.35))
    mask = _toy_shape(kind, rng, max(side, 5))
    pad = 3
    mask = np.pad(mask, pad)
    # dark, saturated objects stand out from the pale, grayish containers
    hue = (class_id / C + rng.uniform(-0.1, 0.1) / C) % 1.0
    rgb = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.8, 1.0), rng.uniform(0.2, 0.4))) * 255
    h, w = mask.shape
    canvas = np.full((h, w, 3), 232.0)
    obj = rgb + rng.normal(0.0, 5.0, (h, w, 3))
    img = np.where(mask[..., None], obj, canvas)
    return to_uint8(img), mask


def gen_toy_corpus(out, C: int, n_fore: int, n_back: int, seed: int, size: int = 64):
    """Write a deterministic toy corpus under ``out`` and load it back.

    Layout::

        out/foregrounds/{classes.json, instances.json, images/, masks/}
        out/backgrounds/*.png (+ regions.json)
    """
    if C < 1 or n_fore < 2 or n_back < 1:
        raise InvalidArgumentError("need C >= 1, n_fore >= 2, n_back >= 1")
    out = Path(out)
    fg_root = out / "foregrounds"
    bg_root = out / "backgrounds"
    (fg_root / "images").mkdir(parents=True, exist_ok=True)
    (fg_root / "masks").mkdir(parents=True, exist_ok=True)
    bg_root.mkdir(parents=True, exist_ok=True)

    fg_rng, bg_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    names = [f"{TOY_SHAPES[k % len(TOY_SHAPES)]}_{k:02d}" for k in range(C)]
    with open(fg_root / CLASSES_FILE, "w") as f:
        json.dump(names, f, indent=1)

    records = []
    for k in range(C):
        for j in range(n_fore):
            img, mask = toy_foreground(fg_rng, k, C, size)
            stem = f"c{k:02d}_{j:04d}.png"
            write_rgb(fg_root / "images" / stem, img)
            write_mask(fg_root / "masks" / stem, mask)
            records.append({"image": f"images/{stem}", "mask": f"masks/{stem}", "class": names[k]})
    with open(fg_root / INSTANCES_FILE, "w") as f:
        json.dump(records, f, indent=1)

    for j in range(n_back):
        write_rgb(bg_root / f"bg_{j:05d}.png", toy_background(bg_rng, size))

    return load_foregrounds(fg_root), load_backgrounds(bg_root, precompute_regions=True)


def segment_is_tight(seg: Segment) -> bool:
    box = mask_bbox(seg.mask)
    h, w = seg.mask.shape
    return box is not None and box.as_list() == [0, 0, w, h]
