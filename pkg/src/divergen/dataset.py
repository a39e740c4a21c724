"""Dataset domain types and canonical JSON I/O.

The on-disk schema is a single JSON document with top-level keys
``categories``, ``images``, ``annotations`` and ``manifest``; masks are stored
as COCO-style uncompressed RLE objects. See ``docs/dataset-schema.md``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .masks import BoundingBox, MaskError, RleMask, bbox_from_mask, rle_decode
from .rng import derive_u64

DEFAULT_RARE_MAX = 10
DEFAULT_COMMON_MAX = 100


class DatasetError(ValueError):
    """Raised on schema violations, bad references or broken invariants."""


class FrequencyGroup(str, enum.Enum):
    FREQUENT = "frequent"
    COMMON = "common"
    RARE = "rare"


class CategoryOrigin(str, enum.Enum):
    LVIS = "lvis"
    EXTRA = "extra"


class ImageSource(str, enum.Enum):
    REAL = "real"
    GENERATIVE = "generative"
    COMPOSITE = "composite"


class Provenance(str, enum.Enum):
    ANNOTATED = "annotated"
    PASTED = "pasted"


@dataclass(frozen=True)
class CategoryRecord:
    id: int
    name: str
    image_count: int = 0
    group: FrequencyGroup = FrequencyGroup.RARE
    origin: CategoryOrigin = CategoryOrigin.LVIS
    definition: str | None = None

    def __post_init__(self) -> None:
        if self.id <= 0:
            raise DatasetError(f"category id must be positive, got {self.id}")
        if self.image_count < 0:
            raise DatasetError(f"category {self.id}: negative image_count")


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    uri: str
    source: ImageSource = ImageSource.REAL

    def __post_init__(self) -> None:
        if self.id <= 0:
            raise DatasetError(f"image id must be positive, got {self.id}")
        if self.width <= 0 or self.height <= 0:
            raise DatasetError(f"image {self.id}: non-positive dimensions")


@dataclass(frozen=True)
class InstanceAnnotation:
    id: int
    image_id: int
    category_id: int
    mask: RleMask
    bbox: BoundingBox
    area: int
    provenance: Provenance = Provenance.ANNOTATED

    def __post_init__(self) -> None:
        if self.id <= 0:
            raise DatasetError(f"annotation id must be positive, got {self.id}")
        if self.area < 0:
            raise DatasetError(f"annotation {self.id}: negative area")


@dataclass(frozen=True)
class GenerationManifestEntry:
    image_id: int
    backend: str
    prompt: str
    seed: int
    resolution: tuple[int, int]  # (width, height)
    created_at: str

    def key(self) -> tuple:
        """Identity of the produced image: replays match on this."""
        return (self.backend, self.prompt, self.seed, self.resolution)


@dataclass(frozen=True)
class DatasetBundle:
    categories: tuple[CategoryRecord, ...] = ()
    images: tuple[ImageRecord, ...] = ()
    annotations: tuple[InstanceAnnotation, ...] = ()
    manifest: tuple[GenerationManifestEntry, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "manifest", tuple(self.manifest))

    def category_by_id(self) -> dict[int, CategoryRecord]:
        return {c.id: c for c in self.categories}

    def image_by_id(self) -> dict[int, ImageRecord]:
        return {i.id: i for i in self.images}

    def annotations_by_image(self) -> dict[int, list[InstanceAnnotation]]:
        out: dict[int, list[InstanceAnnotation]] = {}
        for ann in self.annotations:
            out.setdefault(ann.image_id, []).append(ann)
        return out


def validate_bundle(bundle: DatasetBundle, check_masks: bool = True) -> None:
    """Verify id uniqueness, referential integrity and mask-derived fields."""
    for label, records in (("category", bundle.categories), ("image", bundle.images),
                           ("annotation", bundle.annotations)):
        seen: set[int] = set()
        for record in records:
            if record.id in seen:
                raise DatasetError(f"duplicate {label} id {record.id}")
            seen.add(record.id)
    category_ids = {c.id for c in bundle.categories}
    image_ids = {i.id for i in bundle.images}
    for ann in bundle.annotations:
        if ann.image_id not in image_ids:
            raise DatasetError(
                f"annotation {ann.id} references missing image_id {ann.image_id}"
            )
        if ann.category_id not in category_ids:
            raise DatasetError(
                f"annotation {ann.id} references missing category_id {ann.category_id}"
            )
    for entry in bundle.manifest:
        if entry.image_id not in image_ids:
            raise DatasetError(
                f"manifest entry references missing image_id {entry.image_id}"
            )
    if check_masks:
        images = bundle.image_by_id()
        for ann in bundle.annotations:
            img = images[ann.image_id]
            if ann.mask.size != (img.height, img.width):
                raise DatasetError(
                    f"annotation {ann.id}: mask size {ann.mask.size} != image "
                    f"{img.height}x{img.width}"
                )
            decoded = rle_decode(ann.mask)
            area = decoded.popcount()
            if area != ann.area:
                raise DatasetError(
                    f"annotation {ann.id}: stored area {ann.area} != mask popcount {area}"
                )
            if area == 0:
                raise DatasetError(f"annotation {ann.id}: empty mask")
            tight = bbox_from_mask(decoded)
            if tight != ann.bbox:
                raise DatasetError(
                    f"annotation {ann.id}: stored bbox {ann.bbox.to_json()} is not the "
                    f"tight box {tight.to_json()} of its mask"
                )


def _category_to_json(c: CategoryRecord) -> dict:
    obj = {
        "id": c.id,
        "name": c.name,
        "image_count": c.image_count,
        "group": c.group.value,
        "origin": c.origin.value,
    }
    if c.definition is not None:
        obj["definition"] = c.definition
    return obj


def _category_from_json(obj: dict) -> CategoryRecord:
    try:
        return CategoryRecord(
            id=int(obj["id"]),
            name=str(obj["name"]),
            image_count=int(obj.get("image_count", 0)),
            group=FrequencyGroup(obj.get("group", "rare")),
            origin=CategoryOrigin(obj.get("origin", "lvis")),
            definition=obj.get("definition"),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"malformed category record: {obj!r} ({exc})") from exc


def _image_from_json(obj: dict) -> ImageRecord:
    try:
        return ImageRecord(
            id=int(obj["id"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            uri=str(obj["uri"]),
            source=ImageSource(obj.get("source", "real")),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"malformed image record: {obj!r} ({exc})") from exc


def _annotation_from_json(obj: dict) -> InstanceAnnotation:
    try:
        return InstanceAnnotation(
            id=int(obj["id"]),
            image_id=int(obj["image_id"]),
            category_id=int(obj["category_id"]),
            mask=RleMask.from_json(obj["mask"]),
            bbox=BoundingBox.from_json(obj["bbox"]),
            area=int(obj["area"]),
            provenance=Provenance(obj.get("provenance", "annotated")),
        )
    except (KeyError, ValueError, TypeError, MaskError) as exc:
        ident = obj.get("id", "?") if isinstance(obj, dict) else "?"
        raise DatasetError(f"malformed annotation record {ident}: {exc}") from exc


def _manifest_from_json(obj: dict) -> GenerationManifestEntry:
    try:
        resolution = obj["resolution"]
        return GenerationManifestEntry(
            image_id=int(obj["image_id"]),
            backend=str(obj["backend"]),
            prompt=str(obj["prompt"]),
            seed=int(obj["seed"]),
            resolution=(int(resolution[0]), int(resolution[1])),
            created_at=str(obj["created_at"]),
        )
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        raise DatasetError(f"malformed manifest entry: {obj!r} ({exc})") from exc


def manifest_entry_to_json(entry: GenerationManifestEntry) -> dict:
    return {
        "image_id": entry.image_id,
        "backend": entry.backend,
        "prompt": entry.prompt,
        "seed": entry.seed,
        "resolution": [entry.resolution[0], entry.resolution[1]],
        "created_at": entry.created_at,
    }


def bundle_to_json(bundle: DatasetBundle) -> dict:
    return {
        "categories": [_category_to_json(c) for c in sorted(bundle.categories, key=lambda c: c.id)],
        "images": [
            {"id": i.id, "width": i.width, "height": i.height, "uri": i.uri,
             "source": i.source.value}
            for i in sorted(bundle.images, key=lambda i: i.id)
        ],
        "annotations": [
            {"id": a.id, "image_id": a.image_id, "category_id": a.category_id,
             "mask": a.mask.to_json(), "bbox": a.bbox.to_json(), "area": a.area,
             "provenance": a.provenance.value}
            for a in sorted(bundle.annotations, key=lambda a: a.id)
        ],
        "manifest": [
            manifest_entry_to_json(m)
            for m in sorted(bundle.manifest, key=lambda m: (m.image_id, m.backend, m.seed))
        ],
    }


def bundle_from_json(doc: dict) -> DatasetBundle:
    if not isinstance(doc, dict):
        raise DatasetError("dataset document must be a JSON object")
    missing = {"categories", "images", "annotations"} - set(doc)
    if missing:
        raise DatasetError(f"dataset document missing keys: {sorted(missing)}")
    bundle = DatasetBundle(
        categories=tuple(_category_from_json(o) for o in doc["categories"]),
        images=tuple(_image_from_json(o) for o in doc["images"]),
        annotations=tuple(_annotation_from_json(o) for o in doc["annotations"]),
        manifest=tuple(_manifest_from_json(o) for o in doc.get("manifest", [])),
    )
    validate_bundle(bundle)
    return bundle


def canonical_json_bytes(doc) -> bytes:
    """Lexicographic key order, fixed separators, trailing newline."""
    return (json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def load_dataset(path: str | Path) -> DatasetBundle:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON: {exc}") from exc
    return bundle_from_json(doc)


def save_dataset(bundle: DatasetBundle, path: str | Path) -> None:
    validate_bundle(bundle)
    Path(path).write_bytes(canonical_json_bytes(bundle_to_json(bundle)))


def assign_frequency_groups(
    bundle: DatasetBundle,
    thresholds: tuple[int, int] = (DEFAULT_RARE_MAX, DEFAULT_COMMON_MAX),
) -> DatasetBundle:
    """Relabel category groups from image counts.

    rare: image_count <= rare_max; common: <= common_max; frequent above.
    """
    rare_max, common_max = thresholds
    if rare_max >= common_max:
        raise DatasetError(f"need rare_max < common_max, got {thresholds}")
    categories = tuple(
        replace(c, group=group_for_count(c.image_count, thresholds)) for c in bundle.categories
    )
    return replace(bundle, categories=categories)


def group_for_count(image_count: int, thresholds: tuple[int, int]) -> FrequencyGroup:
    rare_max, common_max = thresholds
    if image_count <= rare_max:
        return FrequencyGroup.RARE
    if image_count <= common_max:
        return FrequencyGroup.COMMON
    return FrequencyGroup.FREQUENT


def images_by_category(bundle: DatasetBundle) -> dict[int, list[int]]:
    """Sorted image-id lists per category, from the annotation table."""
    seen: dict[int, set[int]] = {c.id: set() for c in bundle.categories}
    for ann in bundle.annotations:
        seen.setdefault(ann.category_id, set()).add(ann.image_id)
    return {cid: sorted(ids) for cid, ids in seen.items()}


def build_minitrain_subset(
    bundle: DatasetBundle, per_category_cap: int, seed: int
) -> DatasetBundle:
    """Keep up to ``per_category_cap`` images per category, seeded and stable.

    Selection draws uniformly without replacement from each category's image
    ids in ascending order, so the subset is identical across platforms for a
    given seed. The subset is the union of the per-category picks.
    """
    if per_category_cap < 1:
        raise DatasetError(f"per_category_cap must be >= 1, got {per_category_cap}")
    selected: set[int] = set()
    for cid, image_ids in sorted(images_by_category(bundle).items()):
        if not image_ids:
            continue
        cap = min(per_category_cap, len(image_ids))
        rng = np.random.default_rng(derive_u64(seed, "minitrain", cid))
        picks = rng.choice(len(image_ids), size=cap, replace=False)
        selected.update(image_ids[i] for i in sorted(picks))
    images = tuple(i for i in bundle.images if i.id in selected)
    annotations = tuple(a for a in bundle.annotations if a.image_id in selected)
    manifest = tuple(m for m in bundle.manifest if m.image_id in selected)
    return replace(bundle, images=images, annotations=annotations, manifest=manifest)
