"""Synthetic detection scenes and COCO-style annotation files.

Scenes live in unit coordinates. Annotation files use a nominal 640×640
canvas so ``bbox`` values look like ordinary COCO pixels; each annotation also
carries the exact unit box so a save/load round trip is lossless.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

CANVAS = 640
MIN_SIZE = 0.02
_EDGE_TOL = 1e-12

#: side-length ranges (unit coordinates) for the small, medium, large buckets;
#: their areas on the canvas fall below 32², between 32² and 96², and above 96²
SIZE_BUCKETS = ((0.03, 0.049), (0.06, 0.14), (0.18, 0.45))
BUCKET_WEIGHTS = (0.2, 0.4, 0.4)


class SceneObject(NamedTuple):
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    objects: tuple[SceneObject, ...]
    seed: int = 0

    @property
    def labels(self) -> list[int]:
        return [o.class_id for o in self.objects]

    @property
    def boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)


class AnnotationError(ValueError):
    """Malformed annotation file; the message names the offending field."""


def validate_scene(scene: SceneSpec, num_classes: int | None = None, max_objects: int | None = None,
                   require_objects: bool = False) -> None:
    if require_objects and not scene.objects:
        raise ValueError(f"scene {scene.scene_id} has no objects")
    if max_objects is not None and len(scene.objects) > max_objects:
        raise ValueError(f"scene {scene.scene_id} has {len(scene.objects)} objects, more than {max_objects}")
    for k, o in enumerate(scene.objects):
        where = f"scene {scene.scene_id} object {k}"
        if num_classes is not None and not 0 <= o.class_id < num_classes:
            raise ValueError(f"{where}: class {o.class_id} outside [0, {num_classes})")
        if not all(math.isfinite(v) for v in o.box):
            raise ValueError(f"{where}: non-finite box {o.box}")
        if o.w < MIN_SIZE - _EDGE_TOL or o.h < MIN_SIZE - _EDGE_TOL:
            raise ValueError(f"{where}: box {o.box} smaller than {MIN_SIZE}")
        if (o.cx - o.w / 2 < -_EDGE_TOL or o.cx + o.w / 2 > 1 + _EDGE_TOL
                or o.cy - o.h / 2 < -_EDGE_TOL or o.cy + o.h / 2 > 1 + _EDGE_TOL):
            raise ValueError(f"{where}: box {o.box} leaves the unit square")


def flip_scene(scene: SceneSpec, horizontal: bool = False, vertical: bool = False) -> SceneSpec:
    """Mirror a scene left-right and/or top-bottom; sizes and classes are unchanged."""
    objects = tuple(
        SceneObject(o.class_id, 1.0 - o.cx if horizontal else o.cx, 1.0 - o.cy if vertical else o.cy, o.w, o.h)
        for o in scene.objects
    )
    return SceneSpec(scene.scene_id, objects, scene.seed)


def _overlaps(a: SceneObject, b: SceneObject) -> bool:
    return abs(a.cx - b.cx) < (a.w + b.w) / 2 and abs(a.cy - b.cy) < (a.h + b.h) / 2


def generate_dataset(n_scenes: int, max_objects: int, n_classes: int, seed: int,
                     first_id: int = 0) -> list[SceneSpec]:
    """Deterministic list of scenes with non-overlapping boxes.

    Object counts are uniform in ``[1, max_objects]``; each object picks a
    class uniformly and a size bucket with ``BUCKET_WEIGHTS``, then a width and height within the
    bucket and a position keeping it inside the unit square.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    if max_objects < 1 or n_classes < 1:
        raise ValueError("max_objects and n_classes must be at least 1")
    scenes = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        count = int(rng.integers(1, max_objects + 1))
        objects: list[SceneObject] = []
        attempts = 0
        while len(objects) < count:
            attempts += 1
            if attempts > 10_000:
                raise RuntimeError(f"could not place {count} objects in scene {i}")
            lo, hi = SIZE_BUCKETS[int(rng.choice(len(SIZE_BUCKETS), p=BUCKET_WEIGHTS))]
            w, h = (float(v) for v in rng.uniform(lo, hi, size=2))
            cx = float(rng.uniform(w / 2, 1 - w / 2))
            cy = float(rng.uniform(h / 2, 1 - h / 2))
            obj = SceneObject(int(rng.integers(n_classes)), cx, cy, w, h)
            if not any(_overlaps(obj, o) for o in objects):
                objects.append(obj)
        scenes.append(SceneSpec(first_id + i, tuple(objects), seed))
    return scenes


# ---------------------------------------------------------------------------
# annotation files


def unit_to_bbox(box) -> list[float]:
    """``(cx, cy, w, h)`` in unit coordinates to COCO ``[x, y, w, h]`` on the canvas."""
    cx, cy, w, h = box
    return [(cx - w / 2) * CANVAS, (cy - h / 2) * CANVAS, w * CANVAS, h * CANVAS]


def bbox_to_unit(bbox) -> tuple[float, float, float, float]:
    x, y, w, h = bbox
    return ((x + w / 2) / CANVAS, (y + h / 2) / CANVAS, w / CANVAS, h / CANVAS)


def to_coco(dataset: Sequence[SceneSpec], n_classes: int | None = None) -> dict:
    if n_classes is None:
        n_classes = 1 + max((o.class_id for s in dataset for o in s.objects), default=-1)
    images, annotations = [], []
    ann_id = 1
    for s in dataset:
        images.append({"id": s.scene_id, "width": CANVAS, "height": CANVAS, "seed": s.seed})
        for o in s.objects:
            bbox = unit_to_bbox(o.box)
            annotations.append({
                "id": ann_id,
                "image_id": s.scene_id,
                "category_id": o.class_id + 1,
                "bbox": bbox,
                "area": bbox[2] * bbox[3],
                "iscrowd": 0,
                "unit_box": list(o.box),
            })
            ann_id += 1
    categories = [{"id": c + 1, "name": f"class_{c}"} for c in range(n_classes)]
    return {"images": images, "annotations": annotations, "categories": categories}


def save_annotations(dataset: Sequence[SceneSpec], path, n_classes: int | None = None) -> None:
    text = json.dumps(to_coco(dataset, n_classes), indent=1)
    Path(path).write_text(text + "\n")


def _field(record, key, kind, where):
    if not isinstance(record, dict) or key not in record:
        raise AnnotationError(f"{where}: missing field '{key}'")
    value = record[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise AnnotationError(f"{where}.{key}: expected an integer, got {value!r}")
    if kind is list and not isinstance(value, list):
        raise AnnotationError(f"{where}.{key}: expected a list, got {type(value).__name__}")
    return value


def _box(value, where) -> tuple[float, ...]:
    if (not isinstance(value, list) or len(value) != 4
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        raise AnnotationError(f"{where}: expected 4 numbers, got {value!r}")
    return tuple(float(v) for v in value)


def from_coco(doc: dict) -> list[SceneSpec]:
    if not isinstance(doc, dict):
        raise AnnotationError("top level: expected an object with images/annotations/categories")
    images = _field(doc, "images", list, "top level")
    annotations = _field(doc, "annotations", list, "top level")
    categories = _field(doc, "categories", list, "top level")
    cat_ids = {_field(c, "id", int, f"categories[{k}]") for k, c in enumerate(categories)}
    n_classes = len(cat_ids)
    if cat_ids != set(range(1, n_classes + 1)):
        raise AnnotationError(f"categories: ids must be 1..{n_classes}, got {sorted(cat_ids)}")
    order, seeds, objects = [], {}, {}
    for k, img in enumerate(images):
        iid = _field(img, "id", int, f"images[{k}]")
        if iid in seeds:
            raise AnnotationError(f"images[{k}].id: duplicate image id {iid}")
        seed = img.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise AnnotationError(f"images[{k}].seed: expected an integer, got {seed!r}")
        order.append(iid)
        seeds[iid] = seed
        objects[iid] = []
    for k, ann in enumerate(annotations):
        where = f"annotations[{k}]"
        iid = _field(ann, "image_id", int, where)
        if iid not in objects:
            raise AnnotationError(f"{where}.image_id: unknown image {iid}")
        cat = _field(ann, "category_id", int, where)
        if cat not in cat_ids:
            raise AnnotationError(f"{where}.category_id: {cat} not in categories")
        if "unit_box" in ann:
            box = _box(ann["unit_box"], f"{where}.unit_box")
        else:
            box = bbox_to_unit(_box(_field(ann, "bbox", list, where), f"{where}.bbox"))
        objects[iid].append(SceneObject(cat - 1, *box))
    scenes = [SceneSpec(iid, tuple(objects[iid]), seeds[iid]) for iid in order]
    for k, s in enumerate(scenes):
        try:
            validate_scene(s, n_classes, require_objects=True)
        except ValueError as exc:
            raise AnnotationError(f"images[{k}] (id {s.scene_id}): {exc}") from None
    return scenes


def load_annotations(path) -> list[SceneSpec]:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return from_coco(doc)
    except AnnotationError as exc:
        raise AnnotationError(f"{path}: {exc}") from None
