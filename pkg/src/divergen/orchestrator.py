"""Job planning and execution over pluggable backends.

Built-in synthetic backends run in-process. Anything else goes over the file
exchange protocol: the engine writes ``requests/<job_id>.json`` and polls for
``responses/<job_id>.json`` plus artifact files until a timeout. Failures are
recorded per job and never abort a batch, and results are canonicalized by
job id so worker count cannot change the output.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import backends as be
from .imageio import load_rgb, save_mask_png, save_rgb
from .prompts import PromptPool
from .rng import derive_u64

DEFAULT_TIMEOUT = 60.0
POLL_INTERVAL = 0.05

MIXING_EVEN = "even"


class OrchestrationError(ValueError):
    """Raised on unplannable inputs (bad mixing policy, no generators, ...)."""


@dataclass(frozen=True)
class PlannedGeneration:
    """One image to generate; seeds are unique per (category, prompt, replica)."""

    category_id: int
    backend_id: str
    prompt: str
    prompt_index: int
    replica_index: int
    seed: int
    resolution: tuple[int, int]

    def key(self) -> tuple:
        return (self.backend_id, self.prompt, self.seed, self.resolution)


@dataclass(frozen=True)
class GenerationPlan:
    entries: tuple[PlannedGeneration, ...]

    def per_category_totals(self) -> dict[int, int]:
        totals: dict[int, int] = {}
        for entry in self.entries:
            totals[entry.category_id] = totals.get(entry.category_id, 0) + 1
        return totals

    def per_backend_totals(self) -> dict[str, int]:
        totals: dict[str, int] = {}
        for entry in self.entries:
            totals[entry.backend_id] = totals.get(entry.backend_id, 0) + 1
        return totals


def plan_generation_jobs(
    pools: list[PromptPool],
    generator_backends: list[be.BackendDescriptor],
    mixing: str = MIXING_EVEN,
    seed: int = 0,
) -> GenerationPlan:
    """Spread every pool's image budget across the generator backends.

    The even-mix policy walks a category's images in (prompt, replica) order
    and deals them round-robin over backends sorted by id, so per-category
    backend counts differ by at most one and the remainder lands on the
    lexicographically smallest id. Seeds mix (run seed, category, prompt
    index, replica index) and ignore scheduling entirely.
    """
    generators = sorted(
        (d for d in generator_backends if d.kind is be.BackendKind.IMAGE_GENERATOR),
        key=lambda d: d.id,
    )
    if not generators:
        raise OrchestrationError("no image-generator backends configured")
    if mixing != MIXING_EVEN:
        raise OrchestrationError(f"unknown mixing policy {mixing!r}")
    if not pools:
        raise OrchestrationError("no prompt pools to plan")
    entries: list[PlannedGeneration] = []
    for pool in sorted(pools, key=lambda p: p.category_id):
        unit = 0
        for prompt_index, (prompt, count) in enumerate(zip(pool.prompts, pool.images_per_prompt)):
            for replica_index in range(count):
                backend = generators[unit % len(generators)]
                entries.append(
                    PlannedGeneration(
                        category_id=pool.category_id,
                        backend_id=backend.id,
                        prompt=prompt,
                        prompt_index=prompt_index,
                        replica_index=replica_index,
                        seed=derive_u64(seed, pool.category_id, prompt_index, replica_index),
                        resolution=backend.resolution,
                    )
                )
                unit += 1
    return GenerationPlan(entries=tuple(entries))


def jobs_from_plan(plan: GenerationPlan, first_job_id: int = 0) -> list[be.BackendJob]:
    return [
        be.BackendJob(
            job_id=first_job_id + i,
            backend_id=entry.backend_id,
            payload=be.GenerateImage(
                prompt=entry.prompt, seed=entry.seed, resolution=entry.resolution
            ),
        )
        for i, entry in enumerate(plan.entries)
    ]


class ExchangeDir:
    """Directory layout shared between the engine and external backends."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def requests(self) -> Path:
        return self.root / "requests"

    @property
    def responses(self) -> Path:
        return self.root / "responses"

    @property
    def images(self) -> Path:
        return self.root / "images"

    @property
    def masks(self) -> Path:
        return self.root / "masks"

    @property
    def embeddings(self) -> Path:
        return self.root / "embeddings"

    @property
    def crops(self) -> Path:
        return self.root / "crops"

    def ensure(self) -> "ExchangeDir":
        for sub in (self.requests, self.responses, self.images, self.masks,
                    self.embeddings, self.crops):
            sub.mkdir(parents=True, exist_ok=True)
        return self


def _is_builtin(descriptor: be.BackendDescriptor) -> bool:
    flag = descriptor.params.get("builtin")
    if flag is None:
        return descriptor.id.startswith("synthetic")
    return str(flag).lower() in ("1", "true", "yes")


def _run_builtin(job: be.BackendJob, exchange: ExchangeDir) -> be.BackendResult:
    payload = job.payload
    if isinstance(payload, be.GenerateImage):
        image = be.synthetic_generate(payload.prompt, payload.seed, payload.resolution)
        artifact = exchange.images / f"{job.job_id}.png"
        save_rgb(image, artifact)
        return be.BackendResult(job.job_id, job.backend_id, "ok",
                                artifacts=(str(artifact.relative_to(exchange.root)),))
    if isinstance(payload, be.PredictMask):
        image = load_rgb(exchange.root / payload.image_uri)
        mask, score = be.synthetic_predict_mask(image, payload.points)
        artifact = exchange.masks / f"{job.job_id}.png"
        save_mask_png(mask, artifact)
        return be.BackendResult(job.job_id, job.backend_id, "ok",
                                artifacts=(str(artifact.relative_to(exchange.root)),),
                                scores=(score,))
    if isinstance(payload, be.EmbedImage):
        image = load_rgb(exchange.root / payload.image_uri)
        vector = be.synthetic_embed(image)
        matrix = be.EmbeddingMatrix(dim=len(vector), ids=(job.job_id,),
                                    vectors=vector.reshape(1, -1))
        artifact = exchange.embeddings / f"{job.job_id}.bin"
        be.write_embedding_file(matrix, artifact)
        return be.BackendResult(job.job_id, job.backend_id, "ok",
                                artifacts=(str(artifact.relative_to(exchange.root)),))
    raise OrchestrationError(f"unsupported payload {type(payload).__name__}")


def _await_external(job: be.BackendJob, exchange: ExchangeDir, timeout: float,
                    descriptor: be.BackendDescriptor) -> be.BackendResult:
    doc = job.to_json()
    if descriptor.params:
        doc["payload"]["params"] = dict(descriptor.params)  # steps, guidance, ...
    request_path = exchange.requests / f"{job.job_id}.json"
    tmp_path = exchange.requests / f".{job.job_id}.json.tmp"
    tmp_path.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    tmp_path.replace(request_path)
    response_path = exchange.responses / f"{job.job_id}.json"
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if response_path.exists():
            try:
                doc = json.loads(response_path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                time.sleep(POLL_INTERVAL)  # writer may still be mid-flight
                continue
            return _parse_response(job, doc)
        time.sleep(POLL_INTERVAL)
    return be.BackendResult(job.job_id, job.backend_id, "error",
                            message=f"timeout after {timeout}s waiting for {job.backend_id}")


def _parse_response(job: be.BackendJob, doc: dict) -> be.BackendResult:
    try:
        if int(doc["job_id"]) != job.job_id:
            raise KeyError("job_id mismatch")
        status = doc["status"]
        if status not in ("ok", "error"):
            raise KeyError(f"bad status {status!r}")
        artifact = doc.get("artifact", [])
        artifacts = tuple([artifact] if isinstance(artifact, str) else list(artifact))
        scores = tuple(float(s) for s in doc.get("scores", []))
        return be.BackendResult(job.job_id, job.backend_id, status, artifacts=artifacts,
                                scores=scores, message=str(doc.get("message", "")))
    except (KeyError, TypeError, ValueError) as exc:
        return be.BackendResult(job.job_id, job.backend_id, "error",
                                message=f"malformed response: {exc}")


def run_jobs(
    jobs: list[be.BackendJob],
    descriptors: list[be.BackendDescriptor],
    exchange_dir: str | Path,
    worker_count: int = 1,
    timeout: float = DEFAULT_TIMEOUT,
) -> list[be.BackendResult]:
    """Execute jobs over a worker pool; one result per job, sorted by job id."""
    if worker_count < 1:
        raise OrchestrationError(f"worker_count must be >= 1, got {worker_count}")
    by_id = {d.id: d for d in descriptors}
    exchange = ExchangeDir(exchange_dir).ensure()

    def execute(job: be.BackendJob) -> be.BackendResult:
        descriptor = by_id.get(job.backend_id)
        if descriptor is None:
            return be.BackendResult(job.job_id, job.backend_id, "error",
                                    message=f"unknown backend {job.backend_id!r}")
        if descriptor.kind is not job.required_kind():
            return be.BackendResult(job.job_id, job.backend_id, "error",
                                    message=f"backend kind {descriptor.kind.value} cannot "
                                            f"serve {job.payload.kind}")
        try:
            if _is_builtin(descriptor):
                return _run_builtin(job, exchange)
            return _await_external(job, exchange, timeout, descriptor)
        except Exception as exc:  # per-job isolation: batch never dies
            return be.BackendResult(job.job_id, job.backend_id, "error", message=str(exc))

    if worker_count == 1 or len(jobs) <= 1:
        results = [execute(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=worker_count) as pool:
            results = list(pool.map(execute, jobs))
    return sorted(results, key=lambda r: r.job_id)
