import json

import numpy as np
import pytest

from divergen.dataset import (
    CategoryRecord,
    DatasetBundle,
    DatasetError,
    FrequencyGroup,
    ImageRecord,
    assign_frequency_groups,
    build_minitrain_subset,
    group_for_count,
    images_by_category,
    load_dataset,
    save_dataset,
)

from conftest import disk_bits, make_annotation, write_json


def minimal_doc() -> dict:
    return {
        "categories": [{"id": 1, "name": "banana", "image_count": 0,
                        "group": "rare", "origin": "lvis"}],
        "images": [{"id": 1, "width": 8, "height": 8, "uri": "images/1.png",
                    "source": "real"}],
        "annotations": [],
        "manifest": [],
    }


def build_fixture_bundle(n_categories=4, n_images=64, seed=5) -> DatasetBundle:
    """Multi-category bundle where every image gets 1-3 annotations."""
    rng = np.random.default_rng(seed)
    categories = tuple(
        CategoryRecord(id=c + 1, name=f"cat{c + 1}") for c in range(n_categories)
    )
    images = tuple(
        ImageRecord(id=i + 1, width=16, height=16, uri=f"images/{i + 1}.png")
        for i in range(n_images)
    )
    annotations = []
    ann_id = 1
    for image in images:
        for category in rng.choice(n_categories, size=int(rng.integers(1, 4)),
                                   replace=False):
            bits = disk_bits(16, 16, rng.integers(4, 12), rng.integers(4, 12), 3)
            annotations.append(make_annotation(ann_id, image.id, int(category) + 1, bits))
            ann_id += 1
    return DatasetBundle(categories=categories, images=images,
                         annotations=tuple(annotations))


class TestLoadDataset:
    def test_minimal_file(self, tmp_path):
        path = write_json(tmp_path / "ds.json", minimal_doc())
        bundle = load_dataset(path)
        assert (len(bundle.categories), len(bundle.images), len(bundle.annotations)) == (1, 1, 0)

    def test_missing_image_reference_names_id(self, tmp_path):
        doc = minimal_doc()
        doc["annotations"] = [{
            "id": 1, "image_id": 99, "category_id": 1,
            "mask": {"size": [8, 8], "counts": [0, 64]},
            "bbox": [0, 0, 8, 8], "area": 64, "provenance": "annotated",
        }]
        path = write_json(tmp_path / "ds.json", doc)
        with pytest.raises(DatasetError, match="99"):
            load_dataset(path)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(DatasetError, match="malformed JSON"):
            load_dataset(path)

    def test_schema_mismatch(self, tmp_path):
        path = write_json(tmp_path / "ds.json", {"images": []})
        with pytest.raises(DatasetError, match="missing keys"):
            load_dataset(path)

    def test_duplicate_ids_rejected(self, tmp_path):
        doc = minimal_doc()
        doc["images"].append(dict(doc["images"][0]))
        path = write_json(tmp_path / "ds.json", doc)
        with pytest.raises(DatasetError, match="duplicate image id 1"):
            load_dataset(path)

    def test_bbox_must_be_tight(self, tmp_path):
        doc = minimal_doc()
        doc["annotations"] = [{
            "id": 1, "image_id": 1, "category_id": 1,
            "mask": {"size": [8, 8], "counts": [0, 64]},
            "bbox": [0, 0, 7, 8], "area": 64, "provenance": "annotated",
        }]
        path = write_json(tmp_path / "ds.json", doc)
        with pytest.raises(DatasetError, match="tight box"):
            load_dataset(path)

    def test_fixture_recount_matches_json_walk(self, tmp_path):
        bundle = build_fixture_bundle()
        path = tmp_path / "fixture.json"
        save_dataset(bundle, path)
        # independent recount straight off the JSON document
        doc = json.loads(path.read_text(encoding="utf-8"))
        assert len(doc["categories"]) == 4
        assert len(doc["images"]) == 64
        per_category = {}
        for ann in doc["annotations"]:
            per_category[ann["category_id"]] = per_category.get(ann["category_id"], 0) + 1
        reloaded = load_dataset(path)
        counted = {}
        for ann in reloaded.annotations:
            counted[ann.category_id] = counted.get(ann.category_id, 0) + 1
        assert counted == per_category


class TestSaveDataset:
    def test_round_trip_minimal(self, minimal_bundle, tmp_path):
        path = tmp_path / "ds.json"
        save_dataset(minimal_bundle, path)
        assert load_dataset(path) == minimal_bundle

    def test_round_trip_fixture(self, tmp_path):
        bundle = build_fixture_bundle()
        path = tmp_path / "ds.json"
        save_dataset(bundle, path)
        assert load_dataset(path) == bundle

    def test_two_saves_identical_bytes(self, tmp_path):
        bundle = build_fixture_bundle()
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_dataset(bundle, p1)
        save_dataset(bundle, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestAssignFrequencyGroups:
    def make(self, count):
        return DatasetBundle(categories=(CategoryRecord(id=1, name="x", image_count=count),))

    def test_boundaries(self):
        thresholds = (10, 100)
        assert assign_frequency_groups(self.make(10), thresholds).categories[0].group \
            is FrequencyGroup.RARE
        assert assign_frequency_groups(self.make(11), thresholds).categories[0].group \
            is FrequencyGroup.COMMON
        assert assign_frequency_groups(self.make(100), thresholds).categories[0].group \
            is FrequencyGroup.COMMON
        assert assign_frequency_groups(self.make(101), thresholds).categories[0].group \
            is FrequencyGroup.FREQUENT

    def test_random_counts_match_comparator_oracle(self):
        rng = np.random.default_rng(17)
        thresholds = (10, 100)
        for count in rng.integers(0, 300, size=200):
            group = group_for_count(int(count), thresholds)
            if count <= 10:
                assert group is FrequencyGroup.RARE
            elif count <= 100:
                assert group is FrequencyGroup.COMMON
            else:
                assert group is FrequencyGroup.FREQUENT

    def test_idempotent(self):
        bundle = self.make(57)
        once = assign_frequency_groups(bundle, (10, 100))
        twice = assign_frequency_groups(once, (10, 100))
        assert once == twice

    def test_bad_thresholds(self):
        with pytest.raises(DatasetError):
            assign_frequency_groups(self.make(1), (100, 10))


def overlap_fixture() -> DatasetBundle:
    """Categories 1 and 2 share images and fit under the cap (so all their
    images are taken); category 3 has many disjoint images (so exactly cap)."""
    categories = tuple(CategoryRecord(id=c, name=f"c{c}") for c in (1, 2, 3))
    images = tuple(ImageRecord(id=i, width=8, height=8, uri=f"images/{i}.png")
                   for i in range(1, 31))
    bits = disk_bits(8, 8, 4, 4, 2)
    annotations = []
    ann_id = 1
    for image_id in (1, 2, 3):  # images shared by categories 1 and 2
        for category_id in (1, 2):
            annotations.append(make_annotation(ann_id, image_id, category_id, bits))
            ann_id += 1
    for image_id in range(4, 31):  # category 3 alone
        annotations.append(make_annotation(ann_id, image_id, 3, bits))
        ann_id += 1
    return DatasetBundle(categories=categories, images=images,
                         annotations=tuple(annotations))


class TestBuildMinitrainSubset:
    def test_fewer_images_than_cap_keeps_all(self):
        bundle = overlap_fixture()
        subset = build_minitrain_subset(bundle, per_category_cap=5, seed=1)
        coverage = images_by_category(subset)
        assert len(coverage[1]) == 3
        assert len(coverage[2]) == 3

    def test_cap_applies_and_is_deterministic(self):
        bundle = overlap_fixture()
        a = build_minitrain_subset(bundle, per_category_cap=5, seed=42)
        b = build_minitrain_subset(bundle, per_category_cap=5, seed=42)
        assert a == b
        assert len(images_by_category(a)[3]) == 5
        c = build_minitrain_subset(bundle, per_category_cap=5, seed=43)
        assert c != a  # overwhelmingly likely with 27 choose 5 subsets

    def test_overlap_fixture_recount_oracle(self):
        bundle = overlap_fixture()
        available = {cid: len(ids) for cid, ids in images_by_category(bundle).items()}
        subset = build_minitrain_subset(bundle, per_category_cap=5, seed=7)
        coverage = images_by_category(subset)
        for cid, ids in coverage.items():
            assert len(ids) == min(5, available[cid]), cid

    def test_empty_bundle(self):
        subset = build_minitrain_subset(DatasetBundle(), per_category_cap=5, seed=0)
        assert subset.images == ()

    def test_bad_cap(self):
        with pytest.raises(DatasetError):
            build_minitrain_subset(DatasetBundle(), per_category_cap=0, seed=0)
