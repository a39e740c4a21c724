"""Occlusion-aware instance pasting.

Instances are rendered in ascending z order; each annotation keeps only the
pixels no later instance covers, recomputed as an exact visible mask. No
blending or feathering: pastes are nearest-neighbor scaled and integer-exact,
so composites replay byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetBundle,
    ImageRecord,
    ImageSource,
    InstanceAnnotation,
    Provenance,
    validate_bundle,
)
from .imageio import load_rgb, save_rgb
from .masks import BitMask, RleMask, bbox_from_mask, rle_decode, rle_encode
from .rng import derive_u64

DEFAULT_MAX_PASTE = 20
DEFAULT_SCALE_RANGE = (0.1, 2.0)
_PLACEMENT_ATTEMPTS = 1000


class CompositeError(ValueError):
    """Raised on invalid paste plans or unresolvable sources."""


@dataclass(frozen=True)
class SourceInstance:
    """A filtered, annotated instance eligible for pasting."""

    image_uri: str
    mask: RleMask
    category_id: int


@dataclass(frozen=True)
class PasteInstance:
    source_image: str
    source_mask: RleMask
    category_id: int
    scale: float
    position: tuple[int, int]  # top-left of the scaled patch in the target
    z_order: int

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise CompositeError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class PastePlan:
    target_image_id: int
    instances: tuple[PasteInstance, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", tuple(self.instances))
        z = sorted(i.z_order for i in self.instances)
        if z != list(range(len(self.instances))):
            raise CompositeError(f"z orders {z} are not a permutation of 0..n-1")


@dataclass(frozen=True)
class CompositeResult:
    image: np.ndarray
    annotations: tuple[InstanceAnnotation, ...]
    target_image_id: int


def scale_mask_and_patch(
    mask: BitMask, patch: np.ndarray, scale: float
) -> tuple[BitMask, np.ndarray]:
    """Nearest-neighbor resize of a mask and its pixels to round(dim * scale).

    Output dims are at least 1x1; destination pixel (y, x) samples source
    pixel (y * src_h // dst_h, x * src_w // dst_w).
    """
    if scale <= 0:
        raise CompositeError(f"scale must be positive, got {scale}")
    patch = np.asarray(patch)
    if patch.shape[:2] != (mask.height, mask.width):
        raise CompositeError("mask and patch dimensions differ")
    dst_h = max(1, int(mask.height * scale + 0.5))
    dst_w = max(1, int(mask.width * scale + 0.5))
    if (dst_h, dst_w) == (mask.height, mask.width):
        return mask, patch.copy()
    rows = np.arange(dst_h) * mask.height // dst_h
    cols = np.arange(dst_w) * mask.width // dst_w
    scaled_mask = BitMask.from_array(mask.bits[np.ix_(rows, cols)])
    return scaled_mask, np.ascontiguousarray(patch[np.ix_(rows, cols)])


def _clipped_footprint(
    mask: BitMask, position: tuple[int, int], width: int, height: int
) -> tuple[slice, slice, slice, slice] | None:
    """Target and source slices for the in-bounds part of the paste, or None."""
    x, y = position
    tx0, ty0 = max(0, x), max(0, y)
    tx1, ty1 = min(width, x + mask.width), min(height, y + mask.height)
    if tx0 >= tx1 or ty0 >= ty1:
        return None
    return (
        slice(ty0, ty1),
        slice(tx0, tx1),
        slice(ty0 - y, ty1 - y),
        slice(tx0 - x, tx1 - x),
    )


def sample_paste_plan(
    pool: list[SourceInstance],
    target: ImageRecord,
    max_paste: int = DEFAULT_MAX_PASTE,
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE,
    seed: int = 0,
) -> PastePlan:
    """Draw a seeded plan: count ~ U[0, max_paste], sources with replacement,
    uniform scale, and positions uniform over placements that land at least
    one scaled mask pixel inside the target."""
    lo, hi = scale_range
    if max_paste < 0:
        raise CompositeError(f"max_paste must be >= 0, got {max_paste}")
    if not 0 < lo <= hi:
        raise CompositeError(f"bad scale range {scale_range}")
    rng = np.random.default_rng(derive_u64(seed, "paste-plan", target.id))
    count = int(rng.integers(0, max_paste + 1))
    if count == 0:
        return PastePlan(target_image_id=target.id, instances=())
    if not pool:
        raise CompositeError(f"empty instance pool but {count} pastes requested")
    instances = []
    for z in range(count):
        source = pool[int(rng.integers(0, len(pool)))]
        scale = float(rng.uniform(lo, hi))
        mask = rle_decode(source.mask)
        box = bbox_from_mask(mask)
        tight = BitMask.from_array(
            mask.bits[box.y : box.y + box.h, box.x : box.x + box.w]
        )
        scaled_bits, (sh, sw) = _scaled_bits_only(tight, scale)
        position = None
        for _ in range(_PLACEMENT_ATTEMPTS):
            x = int(rng.integers(1 - sw, target.width))
            y = int(rng.integers(1 - sh, target.height))
            sy = slice(max(0, y) - y, min(target.height, y + sh) - y)
            sx = slice(max(0, x) - x, min(target.width, x + sw) - x)
            if scaled_bits[sy, sx].any():
                position = (x, y)
                break
        if position is None:  # center it; always valid and still deterministic
            position = ((target.width - sw) // 2, (target.height - sh) // 2)
        instances.append(
            PasteInstance(source_image=source.image_uri, source_mask=source.mask,
                          category_id=source.category_id, scale=scale,
                          position=position, z_order=z)
        )
    return PastePlan(target_image_id=target.id, instances=tuple(instances))


def _scaled_bits_only(mask: BitMask, scale: float) -> tuple[np.ndarray, tuple[int, int]]:
    dst_h = max(1, int(mask.height * scale + 0.5))
    dst_w = max(1, int(mask.width * scale + 0.5))
    rows = np.arange(dst_h) * mask.height // dst_h
    cols = np.arange(dst_w) * mask.width // dst_w
    return mask.bits[np.ix_(rows, cols)], (dst_h, dst_w)


def composite(
    base: np.ndarray,
    plan: PastePlan,
    sources_root: str | Path = ".",
    first_annotation_id: int = 1,
    image_cache: dict | None = None,
) -> CompositeResult:
    """Render a paste plan onto a base image.

    Pure in (base, plan, source pixels): z order alone decides occlusion, and
    visible masks are computed top-down so they partition the pasted area.
    Instances whose visible area ends up empty are dropped.
    """
    base = np.asarray(base, dtype=np.uint8)
    height, width = base.shape[:2]
    sources_root = Path(sources_root)
    cache = image_cache if image_cache is not None else {}

    prepared = []  # (instance, target slices, visible bits holder)
    for instance in sorted(plan.instances, key=lambda i: i.z_order):
        uri = instance.source_image
        if uri not in cache:
            path = sources_root / uri
            if not path.exists():
                raise CompositeError(f"unresolvable paste source {uri!r}")
            cache[uri] = load_rgb(path)
        source_image = cache[uri]
        mask = rle_decode(instance.source_mask)
        if mask.bits.shape != source_image.shape[:2]:
            raise CompositeError(
                f"mask {mask.bits.shape} does not fit source image "
                f"{source_image.shape[:2]} for {uri!r}"
            )
        box = bbox_from_mask(mask)
        tight_mask = BitMask.from_array(mask.bits[box.y : box.y + box.h, box.x : box.x + box.w])
        tight_patch = source_image[box.y : box.y + box.h, box.x : box.x + box.w]
        scaled_mask, scaled_patch = scale_mask_and_patch(tight_mask, tight_patch, instance.scale)
        foot = _clipped_footprint(scaled_mask, instance.position, width, height)
        if foot is None:
            prepared.append((instance, None, None, None))
            continue
        ty, tx, sy, sx = foot
        prepared.append((instance, (ty, tx), scaled_mask.bits[sy, sx], scaled_patch[sy, sx]))

    # Occlusion: walk top-down, masking out everything already claimed above.
    occupied = np.zeros((height, width), dtype=bool)
    visible: list[np.ndarray | None] = [None] * len(prepared)
    for idx in range(len(prepared) - 1, -1, -1):
        _, slices, bits, _ = prepared[idx]
        if slices is None or bits is None:
            continue
        ty, tx = slices
        vis = bits & ~occupied[ty, tx]
        occupied[ty, tx] |= bits
        visible[idx] = vis

    image = base.copy()
    annotations = []
    next_id = first_annotation_id
    for idx, (instance, slices, bits, patch) in enumerate(prepared):
        if slices is None:
            continue
        ty, tx = slices
        vis = visible[idx]
        if vis is None or not vis.any():
            continue
        image[ty, tx][vis] = patch[vis]
        full = np.zeros((height, width), dtype=bool)
        full[ty, tx] = vis
        vis_mask = BitMask.from_array(full)
        annotations.append(
            InstanceAnnotation(
                id=next_id,
                image_id=plan.target_image_id,
                category_id=instance.category_id,
                mask=rle_encode(vis_mask),
                bbox=bbox_from_mask(vis_mask),
                area=vis_mask.popcount(),
                provenance=Provenance.PASTED,
            )
        )
        next_id += 1
    return CompositeResult(image=image, annotations=tuple(annotations),
                           target_image_id=plan.target_image_id)


def emit_augmented_dataset(
    results: list[CompositeResult],
    out_dir: str | Path,
    categories,
    created_at: str = "",
) -> DatasetBundle:
    """Write composite PNGs plus a dataset JSON of their visible-mask annotations."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    images = []
    annotations = []
    next_ann_id = 1
    for result in sorted(results, key=lambda r: r.target_image_id):
        uri = f"images/composite_{result.target_image_id}.png"
        save_rgb(result.image, out_dir / uri)
        h, w = result.image.shape[:2]
        images.append(ImageRecord(id=result.target_image_id, width=w, height=h, uri=uri,
                                  source=ImageSource.COMPOSITE))
        for ann in result.annotations:
            annotations.append(
                InstanceAnnotation(
                    id=next_ann_id, image_id=ann.image_id, category_id=ann.category_id,
                    mask=ann.mask, bbox=ann.bbox, area=ann.area, provenance=ann.provenance,
                )
            )
            next_ann_id += 1
    bundle = DatasetBundle(categories=tuple(categories), images=tuple(images),
                           annotations=tuple(annotations))
    validate_bundle(bundle)
    return bundle
