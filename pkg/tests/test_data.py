import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitilab.data import (
    CANVAS,
    SIZE_BUCKETS,
    AnnotationError,
    SceneObject,
    SceneSpec,
    bbox_to_unit,
    flip_scene,
    from_coco,
    generate_dataset,
    load_annotations,
    save_annotations,
    to_coco,
    unit_to_bbox,
    validate_scene,
)


def test_same_seed_same_dataset():
    assert generate_dataset(20, 3, 3, 4) == generate_dataset(20, 3, 3, 4)
    assert generate_dataset(20, 3, 3, 4) != generate_dataset(20, 3, 3, 5)


def test_prefix_stability():
    # scene i depends only on (seed, i)
    assert generate_dataset(5, 3, 3, 1) == generate_dataset(9, 3, 3, 1)[:5]


def test_one_object_per_scene():
    assert all(len(s.objects) == 1 for s in generate_dataset(50, 1, 3, 0))


def test_size_buckets_are_all_represented():
    scenes = generate_dataset(1000, 3, 3, 0)
    sizes = [max(o.w, o.h) for s in scenes for o in s.objects]
    counts = [sum(lo <= v <= hi for v in sizes) for lo, hi in SIZE_BUCKETS]
    assert sum(counts) == len(sizes)
    assert all(c >= 0.1 * len(sizes) for c in counts)


def test_generated_scenes_are_valid_and_disjoint():
    for s in generate_dataset(200, 3, 3, 2):
        validate_scene(s, num_classes=3, max_objects=3, require_objects=True)
        for i, a in enumerate(s.objects):
            for b in s.objects[i + 1:]:
                assert abs(a.cx - b.cx) >= (a.w + b.w) / 2 or abs(a.cy - b.cy) >= (a.h + b.h) / 2


def test_bbox_conversion_example():
    assert unit_to_bbox((0.5, 0.5, 0.25, 0.25)) == [240.0, 240.0, 160.0, 160.0]
    assert bbox_to_unit([240.0, 240.0, 160.0, 160.0]) == (0.5, 0.5, 0.25, 0.25)


def test_coco_fields():
    scenes = [SceneSpec(7, (SceneObject(2, 0.5, 0.5, 0.25, 0.25),), seed=3)]
    doc = to_coco(scenes, 3)
    assert doc["images"] == [{"id": 7, "width": CANVAS, "height": CANVAS, "seed": 3}]
    ann = doc["annotations"][0]
    assert ann["category_id"] == 3 and ann["image_id"] == 7 and ann["iscrowd"] == 0
    assert ann["area"] == 160.0 * 160.0
    assert [c["id"] for c in doc["categories"]] == [1, 2, 3]


def test_round_trip_through_file(tmp_path):
    scenes = generate_dataset(30, 3, 3, 9)
    save_annotations(scenes, tmp_path / "a.json", 3)
    assert load_annotations(tmp_path / "a.json") == scenes


def test_empty_dataset_file(tmp_path):
    save_annotations([], tmp_path / "e.json")
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc == {"images": [], "annotations": [], "categories": []}
    assert load_annotations(tmp_path / "e.json") == []


def test_bbox_only_annotations_load():
    doc = to_coco(generate_dataset(3, 2, 2, 0), 2)
    for ann in doc["annotations"]:
        del ann["unit_box"]
    back = from_coco(doc)
    want = generate_dataset(3, 2, 2, 0)
    for a, b in zip(back, want):
        np.testing.assert_allclose(a.boxes, b.boxes, atol=1e-15)


@pytest.mark.parametrize("mutate, fragment", [
    (lambda d: d.pop("images"), "images"),
    (lambda d: d["annotations"][0].pop("category_id"), "annotations[0]"),
    (lambda d: d["annotations"][0].update(category_id=9), "category_id"),
    (lambda d: d["annotations"][0].update(image_id=999), "unknown image"),
    (lambda d: d["annotations"][0].update(unit_box=[0.5, 0.5, 0.1]), "unit_box"),
    (lambda d: d["images"][0].update(id="a"), "images[0].id"),
    (lambda d: d["annotations"][0].update(unit_box=[0.99, 0.5, 0.2, 0.2]), "leaves the unit square"),
])
def test_malformed_annotations_name_the_field(mutate, fragment):
    doc = to_coco(generate_dataset(2, 2, 2, 0), 2)
    mutate(doc)
    with pytest.raises(AnnotationError, match=fragment.replace("[", r"\[").replace("]", r"\]")):
        from_coco(doc)


def test_invalid_json_reports_position(tmp_path):
    (tmp_path / "bad.json").write_text("{\n  \"images\": [,\n")
    with pytest.raises(AnnotationError, match="line 2"):
        load_annotations(tmp_path / "bad.json")


def test_generator_arguments_are_checked():
    with pytest.raises(ValueError):
        generate_dataset(0, 3, 3, 0)
    with pytest.raises(ValueError):
        generate_dataset(5, 0, 3, 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.02, 0.1), st.floats(0.02, 0.1))
def test_bbox_conversion_round_trips(cx, cy, w, h):
    np.testing.assert_allclose(bbox_to_unit(unit_to_bbox((cx, cy, w, h))), (cx, cy, w, h), atol=1e-15)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 20), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31))
def test_generated_counts_and_classes(n, max_objects, n_classes, seed):
    scenes = generate_dataset(n, max_objects, n_classes, seed)
    assert len(scenes) == n
    for s in scenes:
        assert 1 <= len(s.objects) <= max_objects
        assert all(0 <= o.class_id < n_classes for o in s.objects)


def test_flip_scene_mirrors_boxes():
    s = SceneSpec(4, (SceneObject(1, 0.2, 0.7, 0.1, 0.3),), seed=2)
    h = flip_scene(s, horizontal=True)
    assert h.objects[0] == SceneObject(1, 0.8, 0.7, 0.1, 0.3) and h.scene_id == 4 and h.seed == 2
    assert flip_scene(s, vertical=True).objects[0].cy == pytest.approx(0.3)
    assert flip_scene(s) == s
    assert flip_scene(flip_scene(s, True, True), True, True).objects[0] == pytest.approx(s.objects[0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.booleans(), st.booleans())
def test_flipped_scenes_stay_valid(seed, h, v):
    for s in generate_dataset(5, 3, 3, seed):
        validate_scene(flip_scene(s, h, v), num_classes=3, max_objects=3, require_objects=True)
