"""Deterministic dependency-free adapter for protocol-conformance testing.

Artifacts are a pure function of the request: generated images are a solid
color keyed to (prompt, seed), masks are full-frame, embeddings hash the image
bytes onto the unit sphere. No ML stack anywhere near this file.
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

from .protocol import (
    KIND_EMBED,
    KIND_GENERATE,
    KIND_PREDICT_MASK,
    Request,
    write_embedding,
    write_png,
    write_response,
)

EMBED_DIM = 8


def _solid_color(prompt: str, seed: int) -> tuple[int, int, int]:
    digest = hashlib.blake2b(f"{prompt}\x00{seed}".encode("utf-8"), digest_size=3).digest()
    return digest[0], digest[1], digest[2]


def hash_unit_vector(data: bytes, dim: int = EMBED_DIM) -> list[float]:
    digest = hashlib.blake2b(data, digest_size=2 * dim).digest()
    raw = [int.from_bytes(digest[2 * i : 2 * i + 2], "little") - 32767.5
           for i in range(dim)]
    norm = math.sqrt(sum(v * v for v in raw))
    return [v / norm for v in raw]


class StubAdapter:
    """Handles all three request kinds with deterministic artifacts."""

    def __init__(self, exchange_dir: Path):
        self.exchange = Path(exchange_dir)

    def handle(self, request: Request) -> Path:
        if request.kind == KIND_GENERATE:
            return self._generate(request)
        if request.kind == KIND_PREDICT_MASK:
            return self._predict_mask(request)
        if request.kind == KIND_EMBED:
            return self._embed(request)
        return write_response(self.exchange, request.job_id, "error",
                              message=f"unsupported kind {request.kind!r}")

    def _generate(self, request: Request) -> Path:
        width, height = request.payload["resolution"]
        color = _solid_color(request.payload["prompt"], int(request.payload["seed"]))
        artifact = f"images/{request.job_id}.png"
        write_png(self.exchange / artifact, int(width), int(height), rgb=color)
        return write_response(self.exchange, request.job_id, "ok", artifact=artifact)

    def _predict_mask(self, request: Request) -> Path:
        source = self.exchange / request.payload["image_uri"]
        if not source.exists():
            return write_response(self.exchange, request.job_id, "error",
                                  message=f"missing image {request.payload['image_uri']}")
        width, height = _png_dimensions(source.read_bytes())
        artifact = f"masks/{request.job_id}.png"
        write_png(self.exchange / artifact, width, height, gray=255)
        return write_response(self.exchange, request.job_id, "ok", artifact=artifact,
                              scores=[1.0])

    def _embed(self, request: Request) -> Path:
        source = self.exchange / request.payload["image_uri"]
        if not source.exists():
            return write_response(self.exchange, request.job_id, "error",
                                  message=f"missing image {request.payload['image_uri']}")
        vector = hash_unit_vector(source.read_bytes())
        artifact = f"embeddings/{request.job_id}.bin"
        write_embedding(self.exchange / artifact, request.job_id, vector)
        return write_response(self.exchange, request.job_id, "ok", artifact=artifact)


def _png_dimensions(data: bytes) -> tuple[int, int]:
    if data[:8] != b"\x89PNG\r\n\x1a\n" or data[12:16] != b"IHDR":
        raise ValueError("not a PNG file")
    width = int.from_bytes(data[16:20], "big")
    height = int.from_bytes(data[20:24], "big")
    return width, height
