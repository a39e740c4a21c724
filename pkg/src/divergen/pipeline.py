"""Stage drivers behind the CLI: generate, annotate, filter, compose.

Stages communicate only through files inside a run directory (which doubles
as the backend exchange dir), so each stage can be re-run or swapped in
isolation. All sampling is seeded; reruns with the same inputs rewrite the
same bytes, and already-manifested generation work is skipped.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import backends as be
from .annotation import (
    AttentionMap,
    MaskCandidate,
    background_to_instance_mask,
    corner_prompts,
    foreground_region_from_attention,
    kmeanspp_centers,
    sample_point_prompts,
    select_best_mask,
)
from .compositor import (
    SourceInstance,
    composite,
    emit_augmented_dataset,
    sample_paste_plan,
)
from .dataset import (
    DatasetBundle,
    GenerationManifestEntry,
    ImageRecord,
    ImageSource,
    InstanceAnnotation,
    Provenance,
    canonical_json_bytes,
    load_dataset,
    save_dataset,
    validate_bundle,
)
from .filtration import (
    ReferenceEmbeddingIndex,
    apply_threshold_filter,
    ingest_clip_scores,
    inter_similarity,
    prepare_reference_crop,
    write_decisions,
)
from .imageio import load_mask_png, load_rgb, save_rgb
from .masks import bbox_from_mask, rle_encode
from .orchestrator import ExchangeDir, jobs_from_plan, plan_generation_jobs, run_jobs
from .prompts import PromptPool
from .rng import derive_u64

logger = logging.getLogger(__name__)

# Stage-scoped job-id bases keep request/response files from colliding when
# several stages share one exchange dir.
GENERATE_JOB_BASE = 0
ANNOTATE_JOB_BASE = 1_000_000_000
EMBED_JOB_BASE = 2_000_000_000


class PipelineError(RuntimeError):
    """Raised when a stage cannot run at all (missing inputs, bad config)."""


@dataclass
class StageReport:
    name: str
    processed: int = 0
    skipped: int = 0
    failures: list[str] = None
    extra: dict = None

    def __post_init__(self) -> None:
        if self.failures is None:
            self.failures = []
        if self.extra is None:
            self.extra = {}

    def to_json(self) -> dict:
        doc = {
            "stage": self.name,
            "processed": self.processed,
            "skipped": self.skipped,
            "failure_count": len(self.failures),
            "failures": self.failures,
        }
        doc.update(self.extra)
        return doc


def _now_iso(fixed: str | None) -> str:
    if fixed:
        return fixed
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _write_json(doc, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(canonical_json_bytes(doc))


def _load_manifest_index(path: Path) -> dict[tuple, dict]:
    if not path.exists():
        return {}
    index = {}
    for obj in json.loads(path.read_text(encoding="utf-8")):
        key = (obj["backend"], obj["prompt"], obj["seed"],
               (obj["resolution"][0], obj["resolution"][1]))
        index[key] = obj
    return index


def stage_generate(
    pools: list[PromptPool],
    categories,
    descriptors: list[be.BackendDescriptor],
    out_dir: str | Path,
    seed: int = 0,
    workers: int = 1,
    timeout: float = 60.0,
    exchange_dir: str | Path | None = None,
    created_at: str | None = None,
) -> StageReport:
    """Plan and run image generation; emit images, manifest and a dataset file."""
    out_dir = Path(out_dir)
    exchange = ExchangeDir(exchange_dir or out_dir).ensure()
    plan = plan_generation_jobs(pools, descriptors, seed=seed)
    manifest_path = out_dir / "manifest.json"
    manifest_index = _load_manifest_index(manifest_path)

    report = StageReport(name="generate")
    jobs = []
    index_rows = []
    for job, entry in zip(jobs_from_plan(plan, GENERATE_JOB_BASE), plan.entries):
        image_id = job.job_id + 1
        uri = f"images/{job.job_id}.png"
        index_rows.append(
            {"image_id": image_id, "job_id": job.job_id, "category_id": entry.category_id,
             "backend": entry.backend_id, "prompt": entry.prompt, "seed": entry.seed,
             "resolution": [entry.resolution[0], entry.resolution[1]], "uri": uri}
        )
        cached = manifest_index.get(
            (entry.backend_id, entry.prompt, entry.seed, entry.resolution)
        )
        if cached is not None and (exchange.root / uri).exists():
            report.skipped += 1
            continue
        jobs.append(job)

    results = run_jobs(jobs, descriptors, exchange.root, worker_count=workers, timeout=timeout)
    stamp = _now_iso(created_at)
    by_job = {row["job_id"]: row for row in index_rows}
    failed_jobs = set()
    for result in results:
        row = by_job[result.job_id]
        if not result.ok:
            failed_jobs.add(result.job_id)
            report.failures.append(f"job {result.job_id}: {result.message}")
            continue
        report.processed += 1
        manifest_index[(row["backend"], row["prompt"], row["seed"],
                        tuple(row["resolution"]))] = {
            "image_id": row["image_id"], "backend": row["backend"], "prompt": row["prompt"],
            "seed": row["seed"], "resolution": row["resolution"], "created_at": stamp,
        }

    produced_rows = [row for row in index_rows
                     if row["job_id"] not in failed_jobs
                     and (exchange.root / row["uri"]).exists()]

    manifest_entries = sorted(manifest_index.values(), key=lambda m: m["image_id"])
    _write_json(manifest_entries, manifest_path)
    _write_json(produced_rows, out_dir / "generation_index.json")

    images = []
    manifest = []
    for row in produced_rows:
        w, h = row["resolution"]
        images.append(ImageRecord(id=row["image_id"], width=w, height=h, uri=row["uri"],
                                  source=ImageSource.GENERATIVE))
        entry = manifest_index[(row["backend"], row["prompt"], row["seed"],
                                tuple(row["resolution"]))]
        manifest.append(GenerationManifestEntry(
            image_id=entry["image_id"], backend=entry["backend"], prompt=entry["prompt"],
            seed=entry["seed"], resolution=tuple(entry["resolution"]),
            created_at=entry["created_at"]))
    bundle = DatasetBundle(categories=tuple(categories), images=tuple(images),
                           annotations=(), manifest=tuple(manifest))
    save_dataset(bundle, out_dir / "dataset.json")
    return report


def _foreground_points(run_dir: Path, image, attention_dir: Path,
                       threshold_fraction: float, cluster_count: int,
                       sample_count: int, seed: int):
    """SAM-foreground prompt selection: attention map -> region -> centers -> points."""
    attention_path = attention_dir / f"{image.id}.png"
    if not attention_path.exists():
        raise PipelineError(f"no attention map {attention_path.name}")
    gray = load_rgb(attention_path)[:, :, 0].astype(np.float64)
    attention = AttentionMap(height=gray.shape[0], width=gray.shape[1], values=gray)
    region = foreground_region_from_attention(attention, threshold_fraction)
    ys, xs = np.nonzero(region.bits)
    points = [(float(x), float(y)) for x, y in zip(xs, ys)]
    centers = kmeanspp_centers(points, k=min(cluster_count, len(points)),
                               seed=derive_u64(seed, "fg-centers", image.id)).centers
    return tuple(sample_point_prompts(centers, n=sample_count,
                                      seed=derive_u64(seed, "fg-sample", image.id)))


def stage_annotate(
    run_dir: str | Path,
    descriptors: list[be.BackendDescriptor],
    mask_backend_id: str,
    strategy: str = "sam-bg",
    attention_dir: str | Path | None = None,
    threshold_fraction: float = 0.5,
    cluster_count: int = 5,
    sample_count: int = 3,
    seed: int = 0,
    workers: int = 1,
    timeout: float = 60.0,
    exchange_dir: str | Path | None = None,
    eval_truth_dir: str | Path | None = None,
) -> StageReport:
    """Annotate every generated image with a predicted instance mask.

    sam-bg prompts with the four corners and inverts the returned background
    mask; sam-fg thresholds a supplied attention map, condenses the region to
    k-means++ centers, samples foreground points, and keeps the best-scoring
    candidate mask.
    """
    if strategy not in ("sam-bg", "sam-fg"):
        raise PipelineError(f"unknown annotation strategy {strategy!r}")
    if strategy == "sam-fg" and attention_dir is None:
        raise PipelineError("sam-fg needs --attention-dir with per-image grayscale maps")
    run_dir = Path(run_dir)
    exchange = ExchangeDir(exchange_dir or run_dir).ensure()
    bundle = load_dataset(run_dir / "dataset.json")
    index = json.loads((run_dir / "generation_index.json").read_text(encoding="utf-8"))
    category_of = {row["image_id"]: row["category_id"] for row in index}

    report = StageReport(name="annotate")
    jobs = []
    job_to_image = {}
    for image in sorted(bundle.images, key=lambda i: i.id):
        if image.source is not ImageSource.GENERATIVE:
            continue
        if strategy == "sam-bg":
            points = tuple(corner_prompts(image.width, image.height))
        else:
            try:
                points = _foreground_points(run_dir, image, Path(attention_dir),
                                            threshold_fraction, cluster_count,
                                            sample_count, seed)
            except Exception as exc:
                report.failures.append(f"image {image.id}: {exc}")
                continue
        job_id = ANNOTATE_JOB_BASE + image.id
        jobs.append(be.BackendJob(job_id=job_id, backend_id=mask_backend_id,
                                  payload=be.PredictMask(image_uri=image.uri, points=points)))
        job_to_image[job_id] = image

    results = run_jobs(jobs, descriptors, exchange.root, worker_count=workers, timeout=timeout)
    annotations = []
    next_ann_id = 1
    for result in sorted(results, key=lambda r: r.job_id):
        image = job_to_image[result.job_id]
        if not result.ok or not result.artifacts:
            report.failures.append(f"image {image.id}: {result.message or 'no artifact'}")
            continue
        try:
            candidates = [
                MaskCandidate(mask=load_mask_png(exchange.root / artifact),
                              score=result.scores[i] if i < len(result.scores) else 0.0)
                for i, artifact in enumerate(result.artifacts)
            ]
            best = select_best_mask(candidates)
            if strategy == "sam-bg":
                instance_mask = background_to_instance_mask(best.mask)
            else:
                instance_mask = best.mask
                if instance_mask.popcount() == 0:
                    raise PipelineError("predictor returned an empty foreground mask")
            annotations.append(InstanceAnnotation(
                id=next_ann_id, image_id=image.id,
                category_id=category_of[image.id],
                mask=rle_encode(instance_mask),
                bbox=bbox_from_mask(instance_mask),
                area=instance_mask.popcount(),
                provenance=Provenance.ANNOTATED,
            ))
            next_ann_id += 1
            report.processed += 1
        except Exception as exc:
            report.failures.append(f"image {image.id}: {exc}")
    annotated = DatasetBundle(categories=bundle.categories, images=bundle.images,
                              annotations=tuple(annotations), manifest=bundle.manifest)
    save_dataset(annotated, run_dir / "annotated.json")
    if eval_truth_dir is not None:
        report.extra["miou"] = _evaluate_against_truth(annotations, Path(eval_truth_dir))
    return report


def _evaluate_against_truth(annotations, truth_dir: Path) -> float | None:
    """Mean IoU of produced masks against <image_id>.png ground-truth masks."""
    from .annotation import evaluate_masks_miou
    from .masks import rle_decode

    predicted, truth = [], []
    for ann in annotations:
        path = truth_dir / f"{ann.image_id}.png"
        if path.exists():
            predicted.append(rle_decode(ann.mask))
            truth.append(load_mask_png(path))
    if not predicted:
        return None
    return evaluate_masks_miou(predicted, truth)


def _embedding_for(result: be.BackendResult, exchange_root: Path) -> np.ndarray:
    matrix = be.read_embedding_file(exchange_root / result.artifacts[0])
    if len(matrix.ids) != 1:
        raise PipelineError(
            f"embedder returned {len(matrix.ids)} rows for job {result.job_id}, expected 1"
        )
    return np.asarray(matrix.vectors[0], dtype=np.float64)


def stage_filter(
    run_dir: str | Path,
    descriptors: list[be.BackendDescriptor],
    embed_backend_id: str,
    references_path: str | Path | None = None,
    references_root: str | Path | None = None,
    threshold: float = 0.6,
    clip_scores_path: str | Path | None = None,
    workers: int = 1,
    timeout: float = 60.0,
    exchange_dir: str | Path | None = None,
) -> StageReport:
    """Score generated images against same-category references and drop low scorers."""
    run_dir = Path(run_dir)
    exchange = ExchangeDir(exchange_dir or run_dir).ensure()
    bundle = load_dataset(run_dir / "annotated.json")
    index = json.loads((run_dir / "generation_index.json").read_text(encoding="utf-8"))
    category_of = {row["image_id"]: row["category_id"] for row in index}
    report = StageReport(name="filter")

    if clip_scores_path is not None:
        records = ingest_clip_scores(clip_scores_path)
        decisions = apply_threshold_filter(records, threshold)
        write_decisions(decisions, records, run_dir / "decisions_clip_score.jsonl")
        _emit_filtered(bundle, decisions, run_dir)
        report.processed = len(decisions)
        return report

    jobs = []
    gen_images = [img for img in sorted(bundle.images, key=lambda i: i.id)
                  if img.source is ImageSource.GENERATIVE]
    job_meta: dict[int, tuple[str, int, int]] = {}  # job -> (role, image_id, category_id)
    next_job = EMBED_JOB_BASE
    for image in gen_images:
        jobs.append(be.BackendJob(job_id=next_job, backend_id=embed_backend_id,
                                  payload=be.EmbedImage(image_uri=image.uri)))
        job_meta[next_job] = ("gen", image.id, category_of.get(image.id, 0))
        next_job += 1

    ref_rows = []
    if references_path is not None:
        refs = load_dataset(references_path)
        refs_root = Path(references_root or Path(references_path).parent)
        ref_images = refs.image_by_id()
        for ann in sorted(refs.annotations, key=lambda a: a.id):
            image = ref_images[ann.image_id]
            try:
                crop = prepare_reference_crop(load_rgb(refs_root / image.uri), ann)
            except Exception as exc:
                report.failures.append(f"reference annotation {ann.id}: {exc}")
                continue
            crop_uri = f"crops/ref_{ann.id}.png"
            save_rgb(crop, exchange.root / crop_uri)
            jobs.append(be.BackendJob(job_id=next_job, backend_id=embed_backend_id,
                                      payload=be.EmbedImage(image_uri=crop_uri)))
            job_meta[next_job] = ("ref", ann.id, ann.category_id)
            ref_rows.append(next_job)
            next_job += 1

    results = run_jobs(jobs, descriptors, exchange.root, worker_count=workers, timeout=timeout)
    ref_index = ReferenceEmbeddingIndex()
    gen_vectors: dict[int, tuple[int, np.ndarray]] = {}
    ref_vectors = []
    for result in results:
        role, record_id, category_id = job_meta[result.job_id]
        if not result.ok or not result.artifacts:
            report.failures.append(f"{role} {record_id}: {result.message or 'no artifact'}")
            continue
        try:
            vector = _embedding_for(result, exchange.root)
        except Exception as exc:
            report.failures.append(f"{role} {record_id}: {exc}")
            continue
        if role == "ref":
            ref_index.add(category_id, vector)
            ref_vectors.append((record_id, vector))
        else:
            gen_vectors[record_id] = (category_id, vector)

    records = []
    for image in gen_images:
        if image.id not in gen_vectors:
            continue
        category_id, vector = gen_vectors[image.id]
        records.append(inter_similarity(vector, ref_index.references(category_id),
                                        image_id=image.id, category_id=category_id))
    decisions = apply_threshold_filter(records, threshold)
    write_decisions(decisions, records, run_dir / "decisions_inter_similarity.jsonl")
    _emit_filtered(bundle, decisions, run_dir)
    _export_embeddings(gen_vectors, ref_vectors, run_dir)
    report.processed = len(decisions)
    return report


def _export_embeddings(gen_vectors, ref_vectors, run_dir: Path) -> None:
    if gen_vectors:
        rows = [(image_id, vec.astype(np.float32))
                for image_id, (_, vec) in sorted(gen_vectors.items())]
        be.write_embedding_file(be.EmbeddingMatrix.from_rows(rows),
                                run_dir / "embeddings_generated.bin")
    if ref_vectors:
        rows = [(ann_id, vec.astype(np.float32)) for ann_id, vec in sorted(ref_vectors)]
        be.write_embedding_file(be.EmbeddingMatrix.from_rows(rows),
                                run_dir / "embeddings_references.bin")


def _emit_filtered(bundle: DatasetBundle, decisions, run_dir: Path) -> None:
    kept_ids = {d.image_id for d in decisions if d.kept}
    images = tuple(i for i in bundle.images
                   if i.source is not ImageSource.GENERATIVE or i.id in kept_ids)
    image_ids = {i.id for i in images}
    filtered = DatasetBundle(
        categories=bundle.categories,
        images=images,
        annotations=tuple(a for a in bundle.annotations if a.image_id in image_ids),
        manifest=tuple(m for m in bundle.manifest if m.image_id in image_ids),
    )
    save_dataset(filtered, run_dir / "filtered.json")


def stage_compose(
    pool_path: str | Path,
    out_dir: str | Path,
    target_count: int = 8,
    target_size: tuple[int, int] = (512, 512),
    targets_path: str | Path | None = None,
    max_paste: int = 20,
    scale_range: tuple[float, float] = (0.1, 2.0),
    seed: int = 0,
    sources_root: str | Path | None = None,
) -> StageReport:
    """Paste filtered instances onto blank canvases or an existing image set.

    Source image uris resolve against ``sources_root`` (default: the pool
    file's directory; pass the exchange dir when artifacts live elsewhere).
    """
    pool_path = Path(pool_path)
    pool_bundle = load_dataset(pool_path)
    sources_root = Path(sources_root) if sources_root is not None else pool_path.parent
    pool = [
        SourceInstance(image_uri=pool_bundle.image_by_id()[a.image_id].uri,
                       mask=a.mask, category_id=a.category_id)
        for a in sorted(pool_bundle.annotations, key=lambda a: a.id)
    ]
    report = StageReport(name="compose")
    if targets_path is not None:
        targets_bundle = load_dataset(targets_path)
        targets_root = Path(targets_path).parent
        targets = [(img, load_rgb(targets_root / img.uri))
                   for img in sorted(targets_bundle.images, key=lambda i: i.id)]
    else:
        w, h = target_size
        blank = np.full((h, w, 3), 128, dtype=np.uint8)
        targets = [
            (ImageRecord(id=i + 1, width=w, height=h, uri=f"images/composite_{i + 1}.png",
                         source=ImageSource.COMPOSITE), blank)
            for i in range(target_count)
        ]

    results = []
    cache: dict = {}
    for record, base in targets:
        try:
            plan = sample_paste_plan(pool, record, max_paste=max_paste,
                                     scale_range=scale_range, seed=seed)
            results.append(composite(base, plan, sources_root, image_cache=cache))
            report.processed += 1
        except Exception as exc:
            report.failures.append(f"target {record.id}: {exc}")
    bundle = emit_augmented_dataset(results, out_dir, pool_bundle.categories)
    save_dataset(bundle, Path(out_dir) / "dataset.json")
    return report


def stage_validate(path: str | Path, root: str | Path | None = None,
                   check_files: bool = False) -> StageReport:
    report = StageReport(name="validate")
    bundle = load_dataset(path)
    validate_bundle(bundle)
    report.processed = len(bundle.images) + len(bundle.annotations)
    if check_files:
        base = Path(root or Path(path).parent)
        for image in bundle.images:
            if not (base / image.uri).exists():
                report.failures.append(f"image {image.id}: missing file {image.uri}")
    return report
