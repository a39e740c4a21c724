"""Backend descriptors, job payloads, the embedding binary format, and the
built-in synthetic backends used for offline runs.

The synthetic image generator draws one seeded colored shape on a near-white
canvas. Its companions segment by the same near-white rule and embed by
foreground hue, so the full generate/annotate/filter pipeline runs with no
neural models attached.
"""

from __future__ import annotations

import colorsys
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .annotation import PointPrompt
from .masks import BitMask
from .rng import derive_u64

EMBEDDING_MAGIC = b"DGEMB1"
EMBEDDING_DIM_SYNTHETIC = 8

BACKGROUND_FLOOR = 240  # synthetic background channels never drop below this


class BackendError(ValueError):
    """Raised on malformed backend configuration or artifacts."""


class BackendKind(str, enum.Enum):
    IMAGE_GENERATOR = "image_generator"
    MASK_PREDICTOR = "mask_predictor"
    EMBEDDER = "embedder"


@dataclass(frozen=True)
class BackendDescriptor:
    id: str
    kind: BackendKind
    resolution: tuple[int, int] | None = None  # (w, h), generators only
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind is BackendKind.IMAGE_GENERATOR:
            if self.resolution is None or self.resolution[0] <= 0 or self.resolution[1] <= 0:
                raise BackendError(f"generator {self.id!r} needs a positive resolution")

    def to_json(self) -> dict:
        obj = {"id": self.id, "kind": self.kind.value, "params": dict(self.params)}
        if self.resolution is not None:
            obj["resolution"] = [self.resolution[0], self.resolution[1]]
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "BackendDescriptor":
        try:
            resolution = obj.get("resolution")
            return cls(
                id=str(obj["id"]),
                kind=BackendKind(obj["kind"]),
                resolution=(int(resolution[0]), int(resolution[1])) if resolution else None,
                params=dict(obj.get("params", {})),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise BackendError(f"malformed backend descriptor: {obj!r} ({exc})") from exc


@dataclass(frozen=True)
class GenerateImage:
    prompt: str
    seed: int
    resolution: tuple[int, int]  # (w, h)

    kind = "generate_image"

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "seed": self.seed,
                "resolution": [self.resolution[0], self.resolution[1]]}


@dataclass(frozen=True)
class PredictMask:
    image_uri: str
    points: tuple[PointPrompt, ...]

    kind = "predict_mask"

    def to_json(self) -> dict:
        return {"image_uri": self.image_uri, "points": [p.to_json() for p in self.points]}


@dataclass(frozen=True)
class EmbedImage:
    image_uri: str

    kind = "embed_image"

    def to_json(self) -> dict:
        return {"image_uri": self.image_uri}


Payload = Union[GenerateImage, PredictMask, EmbedImage]

_KIND_FOR_PAYLOAD = {
    GenerateImage: BackendKind.IMAGE_GENERATOR,
    PredictMask: BackendKind.MASK_PREDICTOR,
    EmbedImage: BackendKind.EMBEDDER,
}


@dataclass(frozen=True)
class BackendJob:
    job_id: int
    backend_id: str
    payload: Payload

    def required_kind(self) -> BackendKind:
        return _KIND_FOR_PAYLOAD[type(self.payload)]

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.payload.kind,
            "backend_id": self.backend_id,
            "payload": self.payload.to_json(),
        }


@dataclass(frozen=True)
class BackendResult:
    job_id: int
    backend_id: str
    status: str  # "ok" | "error"
    artifacts: tuple[str, ...] = ()
    scores: tuple[float, ...] = ()
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


# --- embedding matrix and its bit-exact binary format -----------------------


@dataclass(frozen=True)
class EmbeddingMatrix:
    dim: int
    ids: tuple[int, ...]
    vectors: np.ndarray  # (len(ids), dim) float32

    def __post_init__(self) -> None:
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vectors.shape != (len(self.ids), self.dim):
            raise BackendError(
                f"vectors shape {vectors.shape} != ({len(self.ids)}, {self.dim})"
            )
        if vectors.size and not np.isfinite(vectors).all():
            raise BackendError("embedding matrix contains non-finite values")
        vectors.flags.writeable = False
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    @classmethod
    def from_rows(cls, rows: list[tuple[int, np.ndarray]]) -> "EmbeddingMatrix":
        if not rows:
            raise BackendError("cannot build an embedding matrix from zero rows")
        dim = int(np.asarray(rows[0][1]).shape[0])
        ids = tuple(rid for rid, _ in rows)
        vectors = np.stack([np.asarray(vec, dtype=np.float32) for _, vec in rows])
        return cls(dim=dim, ids=ids, vectors=vectors)

    def rows(self):
        for rid, vec in zip(self.ids, self.vectors):
            yield rid, vec


def write_embedding_file(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Header: 6-byte magic + 2 pad, u32 LE rows, u32 LE dim; rows of u64 id + f32 values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = bytearray()
    payload += EMBEDDING_MAGIC + b"\x00\x00"
    payload += struct.pack("<II", len(matrix.ids), matrix.dim)
    for rid, vec in matrix.rows():
        payload += struct.pack("<Q", rid)
        payload += np.asarray(vec, dtype="<f4").tobytes()
    path.write_bytes(bytes(payload))


def read_embedding_file(path: str | Path) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:6] != EMBEDDING_MAGIC:
        raise BackendError(f"{path}: bad embedding-file magic")
    count, dim = struct.unpack_from("<II", raw, 8)
    row_bytes = 8 + 4 * dim
    expected = 16 + count * row_bytes
    if len(raw) != expected:
        raise BackendError(
            f"{path}: expected {expected} bytes for {count} rows of dim {dim}, got {len(raw)}"
        )
    ids = []
    vectors = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        offset = 16 + i * row_bytes
        (rid,) = struct.unpack_from("<Q", raw, offset)
        ids.append(rid)
        vectors[i] = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset + 8)
    if count and not np.isfinite(vectors).all():
        raise BackendError(f"{path}: non-finite embedding value")
    return EmbeddingMatrix(dim=dim, ids=tuple(ids), vectors=vectors)


# --- synthetic built-in backends ---------------------------------------------


def _foreground_color(prompt: str, rng: np.random.Generator) -> tuple[int, int, int]:
    """Hue keyed to the prompt (so one category shares a color family), with a
    small seeded jitter; value capped so no channel reaches the background floor."""
    hue_base = derive_u64("synthetic-hue", prompt) % 360
    hue = (hue_base + rng.uniform(-10.0, 10.0)) % 360
    sat = rng.uniform(0.6, 0.95)
    val = rng.uniform(0.4, 0.75)
    r, g, b = colorsys.hsv_to_rgb(hue / 360.0, sat, val)
    return int(r * 255), int(g * 255), int(b * 255)


def synthetic_shape_mask(prompt: str, seed: int, resolution: tuple[int, int]) -> BitMask:
    """Exact foreground mask the synthetic generator will draw for these inputs."""
    w, h = resolution
    if w <= 0 or h <= 0:
        raise BackendError(f"resolution must be positive, got {resolution}")
    rng = np.random.default_rng(derive_u64("synthetic-image", prompt, seed))
    rng.uniform(-10.0, 10.0)  # keep the color draws in lockstep with generation
    rng.uniform(0.6, 0.95)
    rng.uniform(0.4, 0.75)
    rng.integers(243, 253)
    ys, xs = np.mgrid[0:h, 0:w]
    kind = int(rng.integers(0, 3))
    cx = rng.uniform(0.3, 0.7) * w
    cy = rng.uniform(0.3, 0.7) * h
    if kind == 0:  # ellipse
        ax = rng.uniform(0.08, 0.2) * w
        ay = rng.uniform(0.08, 0.2) * h
        bits = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
    elif kind == 1:  # rectangle
        hw = rng.uniform(0.08, 0.2) * w
        hh = rng.uniform(0.08, 0.2) * h
        bits = (np.abs(xs - cx) <= hw) & (np.abs(ys - cy) <= hh)
    else:  # blob: connected chain of overlapping disks
        radius = rng.uniform(0.06, 0.12) * min(w, h)
        bits = np.zeros((h, w), dtype=bool)
        px, py = cx, cy
        for _ in range(int(rng.integers(2, 5))):
            bits |= (xs - px) ** 2 + (ys - py) ** 2 <= radius**2
            angle = rng.uniform(0.0, 2 * np.pi)
            px = np.clip(px + np.cos(angle) * radius * 1.2, radius, max(radius, w - 1 - radius))
            py = np.clip(py + np.sin(angle) * radius * 1.2, radius, max(radius, h - 1 - radius))
    if not bits.any():  # degenerate tiny canvases still get one foreground pixel
        bits[min(h - 1, int(cy)), min(w - 1, int(cx))] = True
    return BitMask(height=h, width=w, bits=bits)


def synthetic_generate(prompt: str, seed: int, resolution: tuple[int, int]) -> np.ndarray:
    """Deterministic stand-in image: near-white canvas, one colored shape."""
    w, h = resolution
    rng = np.random.default_rng(derive_u64("synthetic-image", prompt, seed))
    color = _foreground_color(prompt, rng)
    background = int(rng.integers(243, 253))
    mask = synthetic_shape_mask(prompt, seed, resolution)
    image = np.full((h, w, 3), background, dtype=np.uint8)
    image[mask.bits] = color
    return image


def synthetic_background_mask(image: np.ndarray) -> BitMask:
    """Near-white pixels (all channels >= the background floor)."""
    image = np.asarray(image)
    bits = (image >= BACKGROUND_FLOOR).all(axis=2)
    return BitMask.from_array(bits)


def synthetic_predict_mask(image: np.ndarray, points: tuple[PointPrompt, ...]) -> tuple[BitMask, float]:
    """Return the region (background-like or foreground-like) containing the prompts.

    Majority vote of the prompt points decides which side of the near-white
    split is wanted; score is the agreeing fraction.
    """
    if not points:
        raise BackendError("mask prediction needs at least one point prompt")
    background = synthetic_background_mask(image).bits
    votes = sum(1 for p in points if background[p.y, p.x])
    want_background = votes * 2 >= len(points)
    bits = background if want_background else ~background
    score = (votes if want_background else len(points) - votes) / len(points)
    return BitMask.from_array(bits), float(score)


def synthetic_embed(image: np.ndarray) -> np.ndarray:
    """Unit vector of foreground hue/saturation statistics, dim 8.

    Same-hue foregrounds land close together, so category-coherent synthetic
    data survives a similarity filter and off-hue outliers do not.
    """
    image = np.asarray(image)
    foreground = ~(image >= BACKGROUND_FLOOR).all(axis=2)
    vec = np.zeros(EMBEDDING_DIM_SYNTHETIC, dtype=np.float64)
    if foreground.any():
        mean = image[foreground].mean(axis=0) / 255.0
        hue, sat, val = colorsys.rgb_to_hsv(*mean.tolist())
        theta = hue * 2 * np.pi
        vec[0] = np.cos(theta)
        vec[1] = np.sin(theta)
        vec[2] = 0.5 * sat
        vec[3] = 0.5 * val
        vec[4] = 0.25 * foreground.mean()
    else:
        vec[5] = 1.0
    return (vec / np.linalg.norm(vec)).astype(np.float32)
