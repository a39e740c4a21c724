"""Bit-exact binary mask primitives: RLE codec, inversion, bbox, IoU, blur, crop.

Masks are boolean numpy arrays wrapped in :class:`BitMask`; images are 8-bit
RGB numpy arrays of shape (H, W, 3). Everything here is pure and integer-exact
so batches can be processed in parallel and replayed byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MaskError(ValueError):
    """Raised on malformed masks or dimension mismatches."""


@dataclass(frozen=True)
class BitMask:
    """Row-major binary mask with immutable dimensions."""

    height: int
    width: int
    bits: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise MaskError(f"mask dimensions must be positive, got {self.height}x{self.width}")
        arr = np.ascontiguousarray(self.bits, dtype=bool)
        if arr.shape != (self.height, self.width):
            raise MaskError(f"bits shape {arr.shape} != ({self.height}, {self.width})")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BitMask":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise MaskError(f"expected 2-D array, got shape {arr.shape}")
        return cls(height=arr.shape[0], width=arr.shape[1], bits=arr.astype(bool))

    @classmethod
    def zeros(cls, height: int, width: int) -> "BitMask":
        return cls(height=height, width=width, bits=np.zeros((height, width), dtype=bool))

    def popcount(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitMask):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and bool(np.array_equal(self.bits, other.bits))
        )

    def __hash__(self) -> int:
        return hash((self.height, self.width, self.bits.tobytes()))


@dataclass(frozen=True)
class RleMask:
    """Column-major zeros-first run-length encoding (COCO uncompressed form)."""

    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        h, w = self.size
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "size", (int(h), int(w)))
        object.__setattr__(self, "counts", counts)
        if any(c < 0 for c in counts):
            raise MaskError("RLE counts must be non-negative")
        if sum(counts) != self.size[0] * self.size[1]:
            raise MaskError(
                f"RLE counts sum {sum(counts)} != H*W = {self.size[0] * self.size[1]}"
            )
        # Zero counts are only legal as a leading zero (mask starts with 1).
        if any(c == 0 for c in counts[1:]):
            raise MaskError("interior zero run in RLE counts")

    def to_json(self) -> dict:
        return {"size": [self.size[0], self.size[1]], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            size = obj["size"]
            counts = obj["counts"]
        except (KeyError, TypeError) as exc:
            raise MaskError(f"malformed RLE object: {obj!r}") from exc
        if not isinstance(size, (list, tuple)) or len(size) != 2:
            raise MaskError(f"malformed RLE size: {size!r}")
        return cls(size=(size[0], size[1]), counts=tuple(counts))


@dataclass(frozen=True)
class BoundingBox:
    """Pixel-aligned box, (x, y) top-left inclusive, w/h strictly positive."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.x < 0 or self.y < 0:
            raise MaskError(f"box origin must be non-negative, got ({self.x}, {self.y})")
        if self.w <= 0 or self.h <= 0:
            raise MaskError(f"box extent must be positive, got {self.w}x{self.h}")

    def to_json(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_json(cls, obj) -> "BoundingBox":
        if not isinstance(obj, (list, tuple)) or len(obj) != 4:
            raise MaskError(f"malformed bbox: {obj!r}")
        return cls(x=int(obj[0]), y=int(obj[1]), w=int(obj[2]), h=int(obj[3]))


def rle_encode(mask: BitMask) -> RleMask:
    """Encode a mask as column-major, zeros-first run lengths."""
    flat = mask.bits.ravel(order="F")
    n = flat.size
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    runs = (ends - starts).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RleMask(size=(mask.height, mask.width), counts=tuple(runs))


def rle_decode(rle: RleMask) -> BitMask:
    """Decode run lengths back to a mask; inverse of :func:`rle_encode`."""
    h, w = rle.size
    values = np.arange(len(rle.counts)) % 2 == 1
    flat = np.repeat(values, np.asarray(rle.counts, dtype=np.int64))
    return BitMask(height=h, width=w, bits=flat.reshape((h, w), order="F"))


def invert_mask(mask: BitMask) -> BitMask:
    return BitMask(height=mask.height, width=mask.width, bits=~mask.bits)


def bbox_from_mask(mask: BitMask) -> BoundingBox:
    """Tight bounding box of the set bits; raises on empty masks."""
    rows = np.flatnonzero(mask.bits.any(axis=1))
    if rows.size == 0:
        raise MaskError("cannot compute bbox of an empty mask")
    cols = np.flatnonzero(mask.bits.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return BoundingBox(x=x0, y=y0, w=x1 - x0 + 1, h=y1 - y0 + 1)


def mask_iou(a: BitMask, b: BitMask) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    if (a.height, a.width) != (b.height, b.width):
        raise MaskError(
            f"mask dimensions differ: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    return inter / union


def _window_sums(values: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Sliding-window sums via an integral image.

    The window anchored at (y, x) spans rows [y - (kh-1)//2, y + kh//2] and
    cols [x - (kw-1)//2, x + kw//2], clipped to the array; even kernels extend
    one pixel further down/right.
    """
    h, w = values.shape[:2]
    integral = np.zeros((h + 1, w + 1) + values.shape[2:], dtype=np.int64)
    np.cumsum(values, axis=0, out=integral[1:, 1:])
    np.cumsum(integral[1:, 1:], axis=1, out=integral[1:, 1:])
    ys = np.arange(h)
    xs = np.arange(w)
    y0 = np.clip(ys - (kh - 1) // 2, 0, h)
    y1 = np.clip(ys + kh // 2 + 1, 0, h)
    x0 = np.clip(xs - (kw - 1) // 2, 0, w)
    x1 = np.clip(xs + kw // 2 + 1, 0, w)
    return (
        integral[np.ix_(y1, x1)]
        - integral[np.ix_(y0, x1)]
        - integral[np.ix_(y1, x0)]
        + integral[np.ix_(y0, x0)]
    )


def box_blur_outside_mask(image: np.ndarray, mask: BitMask, kernel: tuple[int, int]) -> np.ndarray:
    """Mean-filter only the pixels outside the mask.

    Each unmasked pixel becomes the mean of its kernel window over the
    *original* image, normalized by the number of in-bounds window pixels and
    rounded half-up. Masked pixels are copied through untouched.
    """
    kh, kw = kernel
    if kh < 1 or kw < 1:
        raise MaskError(f"kernel must be >= 1 in both dims, got ({kh}, {kw})")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise MaskError("image must be an (H, W, 3) uint8 array")
    if image.shape[:2] != (mask.height, mask.width):
        raise MaskError(
            f"image {image.shape[:2]} and mask ({mask.height}, {mask.width}) dimensions differ"
        )
    sums = _window_sums(image.astype(np.int64), kh, kw)
    counts = _window_sums(np.ones(image.shape[:2], dtype=np.int64), kh, kw)
    counts3 = counts[:, :, None]
    blurred = (2 * sums + counts3) // (2 * counts3)  # round half up in exact ints
    out = np.where(mask.bits[:, :, None], image, blurred.astype(np.uint8))
    return np.ascontiguousarray(out)


def _expand_axis(lo: int, hi: int, pad_lo: int, pad_hi: int, limit: int) -> tuple[int, int]:
    """Grow [lo, hi) by the requested padding, shifting back inside [0, limit)."""
    new_lo = lo - pad_lo
    new_hi = hi + pad_hi
    if new_lo < 0:
        new_hi = min(limit, new_hi - new_lo)
        new_lo = 0
    if new_hi > limit:
        new_lo = max(0, new_lo - (new_hi - limit))
        new_hi = limit
    return new_lo, new_hi


def pad_and_crop_region(image: np.ndarray, box: BoundingBox, min_width: int) -> np.ndarray:
    """Crop the box region, widening narrow boxes to ``min_width`` first.

    Boxes narrower than ``min_width`` are widened symmetrically (odd deficits
    put the extra pixel on the right/bottom); the same per-side padding is
    applied to the height. Padding that would leave the image is shifted to
    the opposite side before clamping, so a flush-left box still reaches
    ``min_width`` when the image allows it.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if box.x + box.w > w or box.y + box.h > h:
        raise MaskError(f"box {box} exceeds image bounds {w}x{h}")
    if box.w >= min_width:
        return np.ascontiguousarray(image[box.y : box.y + box.h, box.x : box.x + box.w])
    deficit = min_width - box.w
    pad_lo = deficit // 2
    pad_hi = deficit - pad_lo
    x0, x1 = _expand_axis(box.x, box.x + box.w, pad_lo, pad_hi, w)
    y0, y1 = _expand_axis(box.y, box.y + box.h, pad_lo, pad_hi, h)
    return np.ascontiguousarray(image[y0:y1, x0:x1])
