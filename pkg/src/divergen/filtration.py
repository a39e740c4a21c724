"""Embedding-similarity filtration.

A generated image's score is its mean cosine similarity against every
same-category reference embedding; images scoring below the threshold are
dropped. Externally computed image-text scores can be ingested for the same
threshold machinery under a separate metric tag.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import InstanceAnnotation
from .masks import bbox_from_mask, box_blur_outside_mask, pad_and_crop_region, rle_decode

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.6
DEFAULT_BLUR_KERNEL = (10, 10)
DEFAULT_MIN_CROP_WIDTH = 80


class FiltrationError(ValueError):
    """Raised on malformed similarity inputs."""


class Metric(str, enum.Enum):
    INTER_SIMILARITY = "inter_similarity"
    CLIP_SCORE = "clip_score"


class FilterReason(str, enum.Enum):
    ABOVE_THRESHOLD = "above_threshold"
    BELOW_THRESHOLD = "below_threshold"
    NO_REFERENCES = "no_references"


@dataclass(frozen=True)
class SimilarityRecord:
    image_id: int
    category_id: int
    metric: Metric
    value: float | None  # None iff no references were available
    reference_count: int

    def __post_init__(self) -> None:
        if self.reference_count < 0:
            raise FiltrationError("reference_count must be >= 0")
        if self.value is None:
            if self.reference_count != 0:
                raise FiltrationError("undefined value requires reference_count == 0")
        else:
            lo = -1.0 if self.metric is Metric.INTER_SIMILARITY else 0.0
            if not lo - 1e-9 <= self.value <= 1.0 + 1e-9:
                raise FiltrationError(
                    f"image {self.image_id}: {self.metric.value} value {self.value} "
                    f"outside [{lo}, 1]"
                )


@dataclass(frozen=True)
class FilterDecision:
    image_id: int
    kept: bool
    reason: FilterReason

    def __post_init__(self) -> None:
        if self.kept == (self.reason is FilterReason.BELOW_THRESHOLD):
            raise FiltrationError("kept flag contradicts reason")

    def to_json(self, record: SimilarityRecord | None = None) -> dict:
        obj = {"image_id": self.image_id, "kept": self.kept, "reason": self.reason.value}
        if record is not None:
            obj["metric"] = record.metric.value
            obj["value"] = record.value
        return obj


class ReferenceEmbeddingIndex:
    """Per-category reference vectors, unit-normalized at ingestion."""

    def __init__(self) -> None:
        self._by_category: dict[int, list[np.ndarray]] = {}
        self._dim: int | None = None

    def add(self, category_id: int, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if self._dim is None:
            self._dim = vector.shape[0]
        elif vector.shape[0] != self._dim:
            raise FiltrationError(f"embedding dim {vector.shape[0]} != index dim {self._dim}")
        norm = np.linalg.norm(vector)
        if norm == 0 or not np.isfinite(norm):
            raise FiltrationError(f"unusable reference vector for category {category_id}")
        self._by_category.setdefault(category_id, []).append(vector / norm)

    def references(self, category_id: int) -> list[np.ndarray]:
        return self._by_category.get(category_id, [])

    def category_ids(self) -> list[int]:
        return sorted(self._by_category)

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_category.values())


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise FiltrationError(f"vector shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise FiltrationError("cosine similarity undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def inter_similarity(
    gen: np.ndarray,
    references: list[np.ndarray],
    image_id: int,
    category_id: int,
) -> SimilarityRecord:
    """Mean cosine against all same-category references; flagged when none exist."""
    if not references:
        return SimilarityRecord(image_id=image_id, category_id=category_id,
                                metric=Metric.INTER_SIMILARITY, value=None, reference_count=0)
    value = float(np.mean([cosine_similarity(gen, ref) for ref in references]))
    value = min(1.0, max(-1.0, value))
    return SimilarityRecord(image_id=image_id, category_id=category_id,
                            metric=Metric.INTER_SIMILARITY, value=value,
                            reference_count=len(references))


def apply_threshold_filter(
    records: list[SimilarityRecord], threshold: float
) -> list[FilterDecision]:
    """Keep records at or above the threshold; unscored records pass with a flag."""
    if not np.isfinite(threshold):
        raise FiltrationError(f"threshold must be finite, got {threshold}")
    decisions = []
    for record in records:
        if record.value is None:
            logger.warning("image %d has no same-category references; keeping it",
                           record.image_id)
            decisions.append(FilterDecision(record.image_id, True, FilterReason.NO_REFERENCES))
        elif record.value >= threshold:
            decisions.append(FilterDecision(record.image_id, True, FilterReason.ABOVE_THRESHOLD))
        else:
            decisions.append(FilterDecision(record.image_id, False, FilterReason.BELOW_THRESHOLD))
    return decisions


def prepare_reference_crop(
    image: np.ndarray,
    annotation: InstanceAnnotation,
    kernel: tuple[int, int] = DEFAULT_BLUR_KERNEL,
    min_width: int = DEFAULT_MIN_CROP_WIDTH,
) -> np.ndarray:
    """Blur everything outside the object mask, then crop its padded box."""
    mask = rle_decode(annotation.mask)
    blurred = box_blur_outside_mask(image, mask, kernel)
    return pad_and_crop_region(blurred, bbox_from_mask(mask), min_width)


def ingest_clip_scores(path: str | Path) -> list[SimilarityRecord]:
    """Load externally computed image-text scores as clip_score records."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FiltrationError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise FiltrationError(f"{path}: expected a JSON array of {{image_id, score}}")
    records = []
    for obj in doc:
        try:
            image_id = int(obj["image_id"])
            score = float(obj["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FiltrationError(f"{path}: malformed entry {obj!r}") from exc
        if not 0.0 <= score <= 1.0:
            raise FiltrationError(
                f"{path}: image_id {image_id} has clip score {score} outside [0, 1]"
            )
        records.append(
            SimilarityRecord(image_id=image_id, category_id=int(obj.get("category_id", 0)),
                             metric=Metric.CLIP_SCORE, value=score, reference_count=1)
        )
    return records


def write_decisions(
    decisions: list[FilterDecision],
    records: list[SimilarityRecord],
    path: str | Path,
) -> None:
    """One JSON object per line: {image_id, metric, value, kept, reason}."""
    by_id = {r.image_id: r for r in records}
    lines = [
        json.dumps(d.to_json(by_id.get(d.image_id)), sort_keys=True)
        for d in sorted(decisions, key=lambda d: d.image_id)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
