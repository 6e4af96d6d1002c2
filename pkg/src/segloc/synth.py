"""Positive-pair synthesis: authentic regions, segment pasting, dataset output.

A positive pair is two composites that each carry a *different* instance
of the *same* class, pasted onto two different backgrounds inside the
backgrounds' authentic regions.
"""
from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import DegenerateSegmentError, EmptyRegionError, InvalidArgumentError, SynthesisError
from .raster import (
    BBox,
    TransformParams,
    blend_segment,
    erode_min,
    mask_bbox,
    resize_bilinear,
    round_half_away,
    threshold_above,
    tighten,
    to_grayscale,
    transform_segment,
    write_rgb,
)

if TYPE_CHECKING:
    from .corpus import BackgroundCorpus, ForegroundCorpus

EROSION_KERNEL = 9
OBJECT_THRESHOLD = 50

PAIRS_FILE = "pairs.jsonl"
CONFIG_FILE = "synth_config.json"


@dataclass(frozen=True)
class SynthConfig:
    c_min: float = 0.25
    c_max: float = 0.65
    target_width: int = 500
    scale_range: tuple[float, float] = (0.5, 1.5)
    brightness_range: tuple[float, float] = (0.6, 1.4)
    contrast_range: tuple[float, float] = (0.6, 1.4)
    seed: int = 0
    max_attempts: int = 8

    def __post_init__(self):
        if not 0.0 < self.c_min < self.c_max <= 1.0:
            raise InvalidArgumentError(
                f"coefficient bounds must satisfy 0 < c_min < c_max <= 1, got ({self.c_min}, {self.c_max})"
            )
        if self.target_width < 1:
            raise InvalidArgumentError("target_width must be >= 1")
        for name in ("scale_range", "brightness_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise InvalidArgumentError(f"{name} must satisfy 0 < low <= high")
        if self.seed < 0:
            raise InvalidArgumentError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass(frozen=True, eq=False)
class View:
    image: np.ndarray
    paste_box: BBox
    coefficient: float
    transform: TransformParams
    background_id: str
    segment_id: str


@dataclass(frozen=True, eq=False)
class PositivePair:
    class_id: int
    views: tuple[View, View]
    retries: int = 0
    rejected: int = 0


def derive_seed(seed: int, *key: int) -> int:
    """Counter-based 64-bit sub-seed, independent of evaluation order."""
    state = np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def authentic_region(img: np.ndarray) -> BBox:
    """Bounding box of the container area of an x-ray style background.

    Gray values are inverted first so that dark (object) pixels are bright;
    the 9x9 minimum filter then wipes out isolated dark specks on the
    whitish margins instead of growing them.
    """
    inv = 255 - to_grayscale(img)
    mask = threshold_above(erode_min(inv, EROSION_KERNEL), OBJECT_THRESHOLD)
    box = mask_bbox(mask)
    if box is None:
        raise EmptyRegionError("no object pixels survive erosion and thresholding")
    return box


def sample_transform(rng: np.random.Generator, cfg: SynthConfig) -> TransformParams:
    angle = float(rng.uniform(0.0, 360.0)) % 360.0
    return TransformParams(
        angle=angle,
        scale=float(rng.uniform(*cfg.scale_range)),
        hflip=bool(rng.random() < 0.5),
        brightness=float(rng.uniform(*cfg.brightness_range)),
        contrast=float(rng.uniform(*cfg.contrast_range)),
    )


def render_segment(crop_img, mask, params: TransformParams):
    """Transform a segment and trim the expanded canvas to the mask."""
    return tighten(*transform_segment(crop_img, mask, params))


def _fits(shape, region: BBox) -> bool:
    h, w = shape[:2]
    return w <= region.w and h <= region.h


class _PairSampler:
    def __init__(self, fores, backs, cfg, rng):
        self.fores, self.backs, self.cfg, self.rng = fores, backs, cfg, rng
        self.rejected = 0
        self.retries = 0
        self.bad: set[int] = set()

    def background(self, avoid: set[int]) -> tuple[int, BBox]:
        n = len(self.backs)
        for _ in range(self.cfg.max_attempts):
            pool = [i for i in range(n) if i not in self.bad and i not in avoid]
            if not pool:
                pool = [i for i in range(n) if i not in self.bad]
            if not pool:
                break
            i = pool[int(self.rng.integers(len(pool)))]
            try:
                return i, self.backs.region(i)
            except EmptyRegionError:
                self.bad.add(i)
                self.rejected += 1
        raise SynthesisError("could not find a background with an authentic region")

    def first_two_backgrounds(self) -> list[tuple[int, BBox]]:
        n = len(self.backs)
        if n >= 2:
            picks = [int(i) for i in self.rng.choice(n, size=2, replace=False)]
        else:
            picks = [0, 0]
        out = []
        for i in picks:
            try:
                out.append((i, self.backs.region(i)))
            except EmptyRegionError:
                self.bad.add(i)
                self.rejected += 1
                out.append(self.background({j for j, _ in out}))
        return out

    def fit(self, seg, params: TransformParams, region: BBox):
        """Render ``seg``; shrink once if it overflows ``region``. None if unfit."""
        try:
            crop_img, mask = render_segment(seg.crop, seg.mask, params)
        except DegenerateSegmentError:
            return None
        if _fits(crop_img.shape, region):
            return params, crop_img, mask
        self.retries += 1
        h, w = crop_img.shape[:2]
        factor = min(region.w / w, region.h / h) * 0.98
        params = dataclasses.replace(params, scale=params.scale * factor)
        try:
            crop_img, mask = render_segment(seg.crop, seg.mask, params)
        except DegenerateSegmentError:
            return None
        if _fits(crop_img.shape, region):
            return params, crop_img, mask
        return None


def synthesize_pair(
    fores: "ForegroundCorpus",
    backs: "BackgroundCorpus",
    cfg: SynthConfig,
    rng: np.random.Generator,
) -> PositivePair:
    """Draw one positive pair (at native background resolution).

    Order of draws: two distinct backgrounds, a class, two distinct
    instances of that class, then per view a transform and coefficient,
    then per view a paste point uniform over every position where the
    rendered segment lies inside the authentic region.
    """
    sampler = _PairSampler(fores, backs, cfg, rng)
    slots = sampler.first_two_backgrounds()

    class_id = int(rng.integers(fores.registry.C))
    members = fores.by_class[class_id]
    picks = rng.choice(len(members), size=2, replace=False) if len(members) >= 2 else [0, 0]
    segs = [members[int(i)] for i in picks]

    draws = [(sample_transform(rng, cfg), float(rng.uniform(cfg.c_min, cfg.c_max))) for _ in range(2)]

    views = []
    for v in range(2):
        params, coeff = draws[v]
        seg = segs[v]
        for attempt in range(cfg.max_attempts):
            b_idx, region = slots[v]
            fitted = sampler.fit(seg, params, region)
            if fitted is not None:
                break
            other = {slots[1 - v][0]}
            slots[v] = sampler.background(other)
        else:
            raise SynthesisError(f"segment {seg.source_id} fits no authentic region after {cfg.max_attempts} attempts")
        params, crop_img, mask = fitted
        h, w = mask.shape
        x = region.x + int(rng.integers(region.w - w + 1))
        y = region.y + int(rng.integers(region.h - h + 1))
        box = BBox(x, y, w, h)
        image = blend_segment(backs.image(b_idx), crop_img, mask, box, coeff)
        views.append(View(image, box, coeff, params, backs.background_id(b_idx), seg.source_id))
    return PositivePair(class_id, (views[0], views[1]), sampler.retries, sampler.rejected)


def resize_to_width(img: np.ndarray, target_width: int) -> np.ndarray:
    if target_width < 1:
        raise InvalidArgumentError("target_width must be >= 1")
    h, w = img.shape[:2]
    if w == target_width:
        return img.copy()
    new_h = max(1, int(round_half_away(h * target_width / w)))
    return resize_bilinear(img, target_width, new_h)


def scale_bbox(box: BBox, src_size: tuple[int, int], dst_size: tuple[int, int]) -> BBox:
    """Map a box between two frames by scaling and rounding its edges."""
    (sw, sh), (dw, dh) = src_size, dst_size
    if (sw, sh) == (dw, dh):
        return box
    fx, fy = dw / sw, dh / sh
    x0 = int(round_half_away(box.x * fx))
    y0 = int(round_half_away(box.y * fy))
    x1 = int(round_half_away(box.x1 * fx))
    y1 = int(round_half_away(box.y1 * fy))
    x0, y0 = min(x0, dw - 1), min(y0, dh - 1)
    return BBox(x0, y0, max(1, min(x1, dw) - x0), max(1, min(y1, dh) - y0))


def pair_for_index(fores, backs, cfg: SynthConfig, index: int) -> tuple[PositivePair, int]:
    """The pair with a given index in the stream seeded by ``cfg.seed``."""
    subseed = derive_seed(cfg.seed, index)
    return synthesize_pair(fores, backs, cfg, np.random.default_rng(subseed)), subseed


def resized_pair(pair: PositivePair, target_width: int) -> list[tuple[np.ndarray, BBox]]:
    out = []
    for view in pair.views:
        img = resize_to_width(view.image, target_width)
        src = (view.image.shape[1], view.image.shape[0])
        dst = (img.shape[1], img.shape[0])
        out.append((img, scale_bbox(view.paste_box, src, dst)))
    return out


@dataclass(frozen=True)
class SynthSummary:
    pairs: int
    backgrounds_rejected: int
    retries: int


def synthesize_dataset(
    fores: "ForegroundCorpus",
    backs: "BackgroundCorpus",
    cfg: SynthConfig,
    n_pairs: int,
    out,
    workers: int = 1,
) -> SynthSummary:
    """Write ``2 * n_pairs`` PNGs, ``pairs.jsonl`` and ``synth_config.json``.

    Each pair is drawn from its own sub-seed, so the output does not depend
    on ``workers``.
    """
    if n_pairs < 1:
        raise InvalidArgumentError("n_pairs must be >= 1")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / CONFIG_FILE, "w") as f:
        json.dump(cfg.to_dict(), f, indent=1, sort_keys=True)

    def job(index: int) -> tuple[dict, int, int]:
        pair, subseed = pair_for_index(fores, backs, cfg, index)
        records = []
        for v, (view, (img, box)) in enumerate(zip(pair.views, resized_pair(pair, cfg.target_width))):
            rel = f"images/{index:06d}_{v}.png"
            write_rgb(out / rel, img)
            records.append(
                {
                    "image": rel,
                    "bbox": box.as_list(),
                    "coeff": view.coefficient,
                    "transform": view.transform.to_dict(),
                    "background_id": view.background_id,
                    "segment_id": view.segment_id,
                    "native_bbox": view.paste_box.as_list(),
                    "native_size": [view.image.shape[1], view.image.shape[0]],
                }
            )
        line = {"pair_id": index, "class_id": pair.class_id, "views": records, "subseed": subseed}
        return line, pair.rejected, pair.retries

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(n_pairs)))
    else:
        results = [job(i) for i in range(n_pairs)]

    with open(out / PAIRS_FILE, "w") as f:
        for line, _, _ in results:
            f.write(json.dumps(line, sort_keys=True) + "\n")
    return SynthSummary(
        pairs=n_pairs,
        backgrounds_rejected=sum(r for _, r, _ in results),
        retries=sum(t for _, _, t in results),
    )


def read_manifest(root) -> list[dict]:
    with open(Path(root) / PAIRS_FILE) as f:
        return [json.loads(line) for line in f if line.strip()]


def replay_view(fores, backs, record: dict, target_width: int) -> np.ndarray:
    """Rebuild a stored view from its manifest record alone."""
    seg = fores.by_id[record["segment_id"]]
    params = TransformParams.from_dict(record["transform"])
    crop_img, mask = render_segment(seg.crop, seg.mask, params)
    bg = backs.image(backs.index_of(record["background_id"]))
    composite = blend_segment(bg, crop_img, mask, BBox.from_list(record["native_bbox"]), record["coeff"])
    return resize_to_width(composite, target_width)
