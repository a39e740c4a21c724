"""Mask-annotation strategies built on a point-promptable mask predictor.

Two routes: the background route prompts with the four image corners and
inverts the returned background mask; the foreground route thresholds an
attention map, condenses it to k-means++ centers and samples point prompts
from those.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .masks import BitMask, MaskError, invert_mask, mask_iou


class AnnotationError(ValueError):
    """Raised on unusable annotation inputs."""


class PointLabel(str, enum.Enum):
    FOREGROUND = "foreground"
    BACKGROUND = "background"


@dataclass(frozen=True)
class PointPrompt:
    x: int
    y: int
    label: PointLabel = PointLabel.FOREGROUND

    def __post_init__(self) -> None:
        if self.x < 0 or self.y < 0:
            raise AnnotationError(f"point prompt out of bounds: ({self.x}, {self.y})")

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "label": self.label.value}

    @classmethod
    def from_json(cls, obj: dict) -> "PointPrompt":
        return cls(x=int(obj["x"]), y=int(obj["y"]), label=PointLabel(obj.get("label", "foreground")))


@dataclass(frozen=True)
class AttentionMap:
    height: int
    width: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise AnnotationError("attention map dimensions must be positive")
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != (self.height, self.width):
            raise AnnotationError(
                f"attention values shape {values.shape} != ({self.height}, {self.width})"
            )
        if not np.isfinite(values).all():
            raise AnnotationError("attention map contains non-finite values")
        if (values < 0).any():
            raise AnnotationError("attention map contains negative values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class MaskCandidate:
    mask: BitMask
    score: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.score):
            raise AnnotationError(f"candidate score must be finite, got {self.score}")


@dataclass(frozen=True)
class KMeansResult:
    centers: tuple[tuple[float, float], ...]
    truncated: bool = False  # fewer distinct points than requested clusters


def corner_prompts(width: int, height: int) -> list[PointPrompt]:
    """The four image corners, which the predictor resolves to the background region."""
    if width < 1 or height < 1:
        raise AnnotationError(f"image dimensions must be >= 1, got {width}x{height}")
    return [
        PointPrompt(x=0, y=0),
        PointPrompt(x=width - 1, y=0),
        PointPrompt(x=0, y=height - 1),
        PointPrompt(x=width - 1, y=height - 1),
    ]


def background_to_instance_mask(background: BitMask) -> BitMask:
    """Invert the background mask and keep the largest connected component.

    Components are 8-connected; interior holes of the survivor are preserved.
    """
    foreground = invert_mask(background)
    if foreground.popcount() == 0:
        raise AnnotationError("background mask covers the whole image; no foreground")
    structure = np.ones((3, 3), dtype=int)
    labels, count = ndimage.label(foreground.bits, structure=structure)
    if count == 1:
        return foreground
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, count + 1))
    keep = int(np.argmax(sizes)) + 1  # ties: lowest label, i.e. first in scan order
    return BitMask.from_array(labels == keep)


def foreground_region_from_attention(attention: AttentionMap, threshold_fraction: float) -> BitMask:
    """Bits where the map reaches ``threshold_fraction`` of its own maximum."""
    if not 0.0 < threshold_fraction < 1.0:
        raise AnnotationError(f"threshold_fraction must be in (0, 1), got {threshold_fraction}")
    peak = float(attention.values.max())
    if peak == 0.0:
        raise AnnotationError("attention map is all-zero")
    return BitMask.from_array(attention.values >= threshold_fraction * peak)


def _ordered_distinct(points: np.ndarray) -> np.ndarray:
    seen: set[tuple[float, float]] = set()
    keep = []
    for i, p in enumerate(points):
        key = (float(p[0]), float(p[1]))
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return points[keep]


def kmeanspp_seed_indices(points, k: int, seed: int) -> list[int]:
    """Deterministic k-means++ seeding: which input points become initial centers.

    The PRNG stream is numpy ``default_rng(seed)`` consuming exactly one
    ``random()`` per sampling decision: the first center is
    ``int(random() * n)``, each later center is picked by scanning cumulative
    squared-distance mass against ``random() * total``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
        raise AnnotationError("points must be a non-empty list of (x, y) pairs")
    if k < 1:
        raise AnnotationError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    n = len(pts)
    chosen = [int(rng.random() * n)]
    d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        total = float(d2.sum())
        r = rng.random() * total
        cum = 0.0
        pick = n - 1
        for i in range(n):
            cum += d2[i]
            if cum > r:
                pick = i
                break
        chosen.append(pick)
        d2 = np.minimum(d2, ((pts - pts[pick]) ** 2).sum(axis=1))
    return chosen


def kmeanspp_centers(points, k: int, seed: int) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations, fully seed-deterministic.

    Seeding comes from :func:`kmeanspp_seed_indices`. Lloyd assignment breaks
    ties toward the lowest center index and stops when no center moves by
    1e-6, or after 100 rounds. Requesting more clusters than there are
    distinct points returns the distinct points with ``truncated`` set.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
        raise AnnotationError("points must be a non-empty list of (x, y) pairs")
    if k < 1:
        raise AnnotationError(f"k must be >= 1, got {k}")
    distinct = _ordered_distinct(pts)
    if k > len(distinct):
        return KMeansResult(
            centers=tuple((float(x), float(y)) for x, y in distinct), truncated=True
        )
    seeded = kmeanspp_seed_indices(pts, k, seed)
    centroids = pts[seeded].astype(np.float64)
    for _ in range(100):
        dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        moved = 0.0
        new_centroids = centroids.copy()
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
                moved = max(moved, float(np.abs(new_centroids[j] - centroids[j]).max()))
        centroids = new_centroids
        if moved < 1e-6:
            break
    return KMeansResult(centers=tuple((float(x), float(y)) for x, y in centroids))


def sample_point_prompts(centers, n: int, seed: int) -> list[PointPrompt]:
    """Uniformly pick ``min(n, len(centers))`` distinct centers as foreground prompts.

    The returned list is canonicalized by ascending (x, y); coordinates round
    to the nearest pixel.
    """
    if n < 1:
        raise AnnotationError(f"n must be >= 1, got {n}")
    centers = list(centers)
    if not centers:
        raise AnnotationError("no centers to sample from")
    rng = np.random.default_rng(seed)
    take = min(n, len(centers))
    picks = rng.permutation(len(centers))[:take]
    chosen = sorted((float(centers[i][0]), float(centers[i][1])) for i in picks)
    return [
        PointPrompt(x=int(round(x)), y=int(round(y)), label=PointLabel.FOREGROUND)
        for x, y in chosen
    ]


def select_best_mask(candidates: list[MaskCandidate]) -> MaskCandidate:
    """Highest score wins; ties go to the earliest candidate."""
    if not candidates:
        raise AnnotationError("no mask candidates to select from")
    best = candidates[0]
    for candidate in candidates[1:]:
        if candidate.score > best.score:
            best = candidate
    return best


def evaluate_masks_miou(predicted: list[BitMask], truth: list[BitMask]) -> float:
    if len(predicted) != len(truth):
        raise AnnotationError(
            f"predicted/truth length mismatch: {len(predicted)} vs {len(truth)}"
        )
    if not predicted:
        raise AnnotationError("cannot average zero mask pairs")
    try:
        return float(np.mean([mask_iou(p, t) for p, t in zip(predicted, truth)]))
    except MaskError as exc:
        raise AnnotationError(str(exc)) from exc
