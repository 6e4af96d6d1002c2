import json

import numpy as np
import pytest

from segloc.corpus import (
    ClassRegistry,
    gen_toy_corpus,
    load_backgrounds,
    load_foregrounds,
    segment_is_tight,
)
from segloc.errors import CorpusInvalidError, IngestError, InvalidArgumentError
from segloc.raster import write_mask, write_rgb
from segloc.synth import authentic_region


def tight_bbox_scan(mask):
    """Row/column scan for the extent of the true pixels, as (w, h)."""
    rows = [y for y in range(mask.shape[0]) if mask[y].any()]
    cols = [x for x in range(mask.shape[1]) if mask[:, x].any()]
    return cols[-1] - cols[0] + 1, rows[-1] - rows[0] + 1


def write_manifest(root, records, classes):
    (root / "instances.json").write_text(json.dumps(records))
    (root / "classes.json").write_text(json.dumps(classes))


def add_instance(root, name, mask, color=(200, 30, 30)):
    h, w = mask.shape
    img = np.full((h, w, 3), 230, np.uint8)
    img[mask] = color
    write_rgb(root / f"{name}.png", img)
    write_mask(root / f"{name}_m.png", mask)
    return {"image": f"{name}.png", "mask": f"{name}_m.png"}


def blob(h=12, w=12, rows=(4, 9), cols=(2, 7)):
    m = np.zeros((h, w), bool)
    m[rows[0] : rows[1] + 1, cols[0] : cols[1] + 1] = True
    return m


class TestRegistry:
    def test_bounds(self):
        with pytest.raises(InvalidArgumentError):
            ClassRegistry(())
        with pytest.raises(InvalidArgumentError):
            ClassRegistry(tuple(f"c{i}" for i in range(65)))
        with pytest.raises(InvalidArgumentError):
            ClassRegistry(("a", "a"))

    def test_paper_class_count(self):
        assert ClassRegistry(tuple(f"item{i}" for i in range(12))).C == 12


class TestLoadForegrounds:
    def test_count_preserved(self, tmp_path):
        recs = [dict(add_instance(tmp_path, f"b{i}", blob()), **{"class": "baton"}) for i in range(3)]
        write_manifest(tmp_path, recs, ["baton"])
        corpus = load_foregrounds(tmp_path)
        assert len(corpus.instances) == 3
        assert all(s.class_id == 0 for s in corpus.instances)
        assert len(corpus.by_class[0]) == 3

    def test_unknown_label(self, tmp_path):
        recs = [dict(add_instance(tmp_path, f"b{i}", blob()), **{"class": "baton"}) for i in range(2)]
        recs.append(dict(add_instance(tmp_path, "l", blob()), **{"class": "laser"}))
        write_manifest(tmp_path, recs, ["baton"])
        with pytest.raises(IngestError, match="laser"):
            load_foregrounds(tmp_path)

    def test_crop_is_tightened(self, tmp_path):
        mask = blob(rows=(4, 9), cols=(2, 7))
        recs = [dict(add_instance(tmp_path, f"b{i}", mask), **{"class": "baton"}) for i in range(2)]
        write_manifest(tmp_path, recs, ["baton"])
        seg = load_foregrounds(tmp_path).instances[0]
        assert (seg.crop.shape[1], seg.crop.shape[0]) == tight_bbox_scan(mask) == (6, 6)
        assert segment_is_tight(seg)

    def test_empty_mask_skipped(self, tmp_path):
        recs = [dict(add_instance(tmp_path, f"b{i}", blob()), **{"class": "baton"}) for i in range(2)]
        recs.append(dict(add_instance(tmp_path, "e", np.zeros((5, 5), bool)), **{"class": "baton"}))
        write_manifest(tmp_path, recs, ["baton"])
        corpus = load_foregrounds(tmp_path)
        assert corpus.skipped == 1 and len(corpus.instances) == 2

    def test_single_instance_class_invalid(self, tmp_path):
        recs = [dict(add_instance(tmp_path, "b0", blob()), **{"class": "baton"})]
        write_manifest(tmp_path, recs, ["baton"])
        with pytest.raises(CorpusInvalidError, match="baton"):
            load_foregrounds(tmp_path)

    def test_manifest_order(self, tmp_path):
        recs = []
        for i, cls in enumerate(["a", "b", "a", "b"]):
            recs.append(dict(add_instance(tmp_path, f"x{i}", blob()), **{"class": cls}))
        write_manifest(tmp_path, recs, ["a", "b"])
        corpus = load_foregrounds(tmp_path)
        assert [s.class_id for s in corpus.instances] == [0, 1, 0, 1]
        assert sum(len(v) for v in corpus.by_class.values()) == len(corpus.instances)


class TestLoadBackgrounds:
    def make(self, root, n, white=()):
        rng = np.random.default_rng(0)
        for i in range(n):
            img = np.full((40, 40, 3), 250, np.uint8)
            if i not in white:
                img[8:30, 5:35] = rng.integers(40, 120)
            write_rgb(root / f"im{i:02d}.png", img)

    def test_all_valid(self, tmp_path):
        self.make(tmp_path, 10)
        assert len(load_backgrounds(tmp_path)) == 10

    def test_white_excluded(self, tmp_path):
        self.make(tmp_path, 10, white={3})
        corpus = load_backgrounds(tmp_path)
        assert len(corpus) == 9 and corpus.excluded == 1

    def test_empty_dir(self, tmp_path):
        with pytest.raises(IngestError):
            load_backgrounds(tmp_path)

    def test_cache_matches_fresh(self, tmp_path):
        self.make(tmp_path, 6)
        load_backgrounds(tmp_path)
        assert (tmp_path / "regions.json").exists()
        cached = load_backgrounds(tmp_path)
        for i in range(len(cached)):
            assert cached.region(i) == authentic_region(cached.image(i))

    def test_lazy_regions(self, tmp_path):
        self.make(tmp_path, 4, white={0})
        corpus = load_backgrounds(tmp_path, precompute_regions=False)
        assert len(corpus) == 4 and corpus.regions is None


class TestToyCorpus:
    def test_deterministic(self, tmp_path):
        gen_toy_corpus(tmp_path / "a", C=3, n_fore=2, n_back=3, seed=5)
        gen_toy_corpus(tmp_path / "b", C=3, n_fore=2, n_back=3, seed=5)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_segments_tight(self, toy):
        _, fores, _ = toy
        assert all(segment_is_tight(s) for s in fores.instances)

    def test_shapes_cycle_beyond_six(self, tmp_path):
        fores, _ = gen_toy_corpus(tmp_path, C=8, n_fore=2, n_back=1, seed=1)
        assert fores.registry.C == 8
        assert fores.registry.names[6].startswith("rod")

    def test_regions_cover_quarter(self, tmp_path):
        # 500 seeded backgrounds, each region >= 25% of the image
        from segloc.corpus import toy_background

        rng = np.random.default_rng(2024)
        for _ in range(500):
            img = toy_background(rng, 64)
            assert authentic_region(img).area >= 0.25 * 64 * 64

    def test_bad_args(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            gen_toy_corpus(tmp_path, C=2, n_fore=1, n_back=1, seed=0)
