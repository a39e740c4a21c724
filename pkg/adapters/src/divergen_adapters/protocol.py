"""Engine exchange protocol, writer side, stdlib only.

The engine drops ``requests/<job_id>.json`` into the exchange dir; an adapter
answers each with ``responses/<job_id>.json`` plus artifact files. Artifacts:
PNGs under ``images/`` or ``masks/``, embeddings under ``embeddings/`` in the
DGEMB1 binary layout (6-byte magic + 2 pad, u32 LE row count, u32 LE dim,
then u64 LE record id + dim float32 LE per row).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

EMBEDDING_MAGIC = b"DGEMB1"

KIND_GENERATE = "generate_image"
KIND_PREDICT_MASK = "predict_mask"
KIND_EMBED = "embed_image"


@dataclass(frozen=True)
class Request:
    job_id: int
    kind: str
    backend_id: str
    payload: dict
    path: Path

    @classmethod
    def from_file(cls, path: Path) -> "Request":
        doc = json.loads(path.read_text(encoding="utf-8"))
        return cls(job_id=int(doc["job_id"]), kind=str(doc["kind"]),
                   backend_id=str(doc["backend_id"]), payload=dict(doc["payload"]),
                   path=path)


def write_response(exchange: Path, job_id: int, status: str, artifact=None,
                   scores=None, message: str = "") -> Path:
    doc: dict = {"job_id": job_id, "status": status}
    if artifact is not None:
        doc["artifact"] = artifact
    if scores is not None:
        doc["scores"] = list(scores)
    if message:
        doc["message"] = message
    responses = exchange / "responses"
    responses.mkdir(parents=True, exist_ok=True)
    target = responses / f"{job_id}.json"
    tmp = responses / f".{job_id}.json.tmp"
    tmp.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(target)  # atomic: the engine never sees a half-written response
    return target


def _png_chunk(tag: bytes, body: bytes) -> bytes:
    return (struct.pack(">I", len(body)) + tag + body
            + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF))


def write_png(path: Path, width: int, height: int, rgb=None, gray=None) -> None:
    """Tiny PNG encoder: 8-bit RGB (solid artifacts) or 8-bit grayscale (masks)."""
    if (rgb is None) == (gray is None):
        raise ValueError("provide exactly one of rgb / gray")
    if rgb is not None:
        color_type, pixel = 2, bytes(rgb)
        row = b"\x00" + pixel * width
    else:
        color_type, pixel = 0, bytes([gray])
        row = b"\x00" + pixel * width
    ihdr = struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0)
    idat = zlib.compress(row * height)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", idat)
        + _png_chunk(b"IEND", b"")
    )


def write_png_gray_rows(path: Path, width: int, height: int, rows) -> None:
    """Grayscale PNG from per-row byte strings (for non-uniform masks)."""
    ihdr = struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + bytes(r) for r in rows)
    idat = zlib.compress(raw)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", idat)
        + _png_chunk(b"IEND", b"")
    )


def write_embedding(path: Path, record_id: int, vector) -> None:
    """One-row DGEMB1 file."""
    values = [float(v) for v in vector]
    payload = bytearray()
    payload += EMBEDDING_MAGIC + b"\x00\x00"
    payload += struct.pack("<II", 1, len(values))
    payload += struct.pack("<Q", record_id)
    payload += struct.pack(f"<{len(values)}f", *values)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(payload))
