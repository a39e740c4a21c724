"""Real-model adapters: diffusion generators, SAM mask prediction, CLIP embedding.

Heavyweight stacks are imported lazily so the package installs and the stub
runs with no ML dependencies. Each handler exposes the same ``handle(request)``
surface as the stub. Generation parameters arrive with the request (the
engine owns reproducibility metadata); anything unset falls back to the
model's own defaults.
"""

from __future__ import annotations

from pathlib import Path

from .protocol import (
    KIND_EMBED,
    KIND_GENERATE,
    KIND_PREDICT_MASK,
    Request,
    write_embedding,
    write_png_gray_rows,
    write_response,
)


class AdapterError(RuntimeError):
    """Raised when a real-model stack is missing or fails to load."""


def _require(module: str, extra: str):
    try:
        return __import__(module)
    except ImportError as exc:
        raise AdapterError(
            f"{module} is not installed; install divergen-adapters[{extra}]"
        ) from exc


class StableDiffusionAdapter:
    """Text-to-image via diffusers; v1.5 runs at 512x512 with the usual
    50-step / 7.5-guidance settings unless the request says otherwise."""

    def __init__(self, exchange_dir: Path, model_name: str = "runwayml/stable-diffusion-v1-5",
                 device: str = "cuda"):
        _require("torch", "sd")
        diffusers = _require("diffusers", "sd")
        self.exchange = Path(exchange_dir)
        try:
            self.pipe = diffusers.StableDiffusionPipeline.from_pretrained(model_name)
            self.pipe.to(device)
        except Exception as exc:
            raise AdapterError(f"failed to load {model_name}: {exc}") from exc
        self.device = device

    def handle(self, request: Request) -> Path:
        if request.kind != KIND_GENERATE:
            return write_response(self.exchange, request.job_id, "error",
                                  message=f"sd adapter cannot serve {request.kind}")
        import torch

        payload = request.payload
        params = payload.get("params", {})
        width, height = payload["resolution"]
        generator = torch.Generator(self.device).manual_seed(int(payload["seed"]))
        image = self.pipe(
            payload["prompt"],
            width=int(width),
            height=int(height),
            num_inference_steps=int(params.get("steps", 50)),
            guidance_scale=float(params.get("guidance", 7.5)),
            negative_prompt=params.get("negative_prompt"),
            generator=generator,
        ).images[0]
        artifact = f"images/{request.job_id}.png"
        target = self.exchange / artifact
        target.parent.mkdir(parents=True, exist_ok=True)
        image.save(target)
        return write_response(self.exchange, request.job_id, "ok", artifact=artifact)


class DeepFloydIFAdapter:
    """Two-stage IF pipeline; artifacts are the 256x256 stage-II outputs."""

    def __init__(self, exchange_dir: Path, stage1: str = "DeepFloyd/IF-I-XL-v1.0",
                 stage2: str = "DeepFloyd/IF-II-L-v1.0", device: str = "cuda"):
        _require("torch", "sd")
        diffusers = _require("diffusers", "sd")
        self.exchange = Path(exchange_dir)
        try:
            self.stage1 = diffusers.DiffusionPipeline.from_pretrained(stage1)
            self.stage2 = diffusers.DiffusionPipeline.from_pretrained(
                stage2, text_encoder=None)
            self.stage1.to(device)
            self.stage2.to(device)
        except Exception as exc:
            raise AdapterError(f"failed to load IF pipelines: {exc}") from exc
        self.device = device

    def handle(self, request: Request) -> Path:
        if request.kind != KIND_GENERATE:
            return write_response(self.exchange, request.job_id, "error",
                                  message=f"if adapter cannot serve {request.kind}")
        import torch

        payload = request.payload
        generator = torch.Generator(self.device).manual_seed(int(payload["seed"]))
        prompt_embeds, negative_embeds = self.stage1.encode_prompt(payload["prompt"])
        stage1_out = self.stage1(prompt_embeds=prompt_embeds,
                                 negative_prompt_embeds=negative_embeds,
                                 generator=generator, output_type="pt").images
        image = self.stage2(image=stage1_out, prompt_embeds=prompt_embeds,
                            negative_prompt_embeds=negative_embeds,
                            generator=generator).images[0]
        artifact = f"images/{request.job_id}.png"
        target = self.exchange / artifact
        target.parent.mkdir(parents=True, exist_ok=True)
        image.save(target)
        return write_response(self.exchange, request.job_id, "ok", artifact=artifact)


class SamAdapter:
    """Point-prompted mask prediction with SAM (ViT-H by default). Every
    candidate mask is written as its own PNG; scores ride in the response."""

    def __init__(self, exchange_dir: Path, checkpoint: str, model_type: str = "vit_h",
                 device: str = "cuda"):
        _require("torch", "sam")
        sam_pkg = _require("segment_anything", "sam")
        self.exchange = Path(exchange_dir)
        try:
            sam = sam_pkg.sam_model_registry[model_type](checkpoint=checkpoint)
            sam.to(device)
            self.predictor = sam_pkg.SamPredictor(sam)
        except Exception as exc:
            raise AdapterError(f"failed to load SAM {model_type}: {exc}") from exc

    def handle(self, request: Request) -> Path:
        if request.kind != KIND_PREDICT_MASK:
            return write_response(self.exchange, request.job_id, "error",
                                  message=f"sam adapter cannot serve {request.kind}")
        import numpy as np
        from PIL import Image

        payload = request.payload
        image = np.asarray(Image.open(self.exchange / payload["image_uri"]).convert("RGB"))
        points = payload["points"]
        coords = np.array([[p["x"], p["y"]] for p in points])
        labels = np.ones(len(points), dtype=np.int64)
        self.predictor.set_image(image)
        masks, scores, _ = self.predictor.predict(point_coords=coords,
                                                  point_labels=labels,
                                                  multimask_output=True)
        artifacts = []
        for i, mask in enumerate(masks):
            artifact = f"masks/{request.job_id}_{i}.png"
            rows = [bytes(255 if v else 0 for v in row) for row in mask]
            write_png_gray_rows(self.exchange / artifact, mask.shape[1], mask.shape[0],
                                rows)
            artifacts.append(artifact)
        return write_response(self.exchange, request.job_id, "ok", artifact=artifacts,
                              scores=[float(s) for s in scores])


class ClipAdapter:
    """Image embedding via CLIP ViT-L/14, emitted in the engine's binary format."""

    def __init__(self, exchange_dir: Path, model_name: str = "openai/clip-vit-large-patch14",
                 device: str = "cpu"):
        _require("torch", "clip")
        transformers = _require("transformers", "clip")
        self.exchange = Path(exchange_dir)
        try:
            self.model = transformers.CLIPVisionModelWithProjection.from_pretrained(model_name)
            self.processor = transformers.CLIPImageProcessor.from_pretrained(model_name)
            self.model.to(device)
        except Exception as exc:
            raise AdapterError(f"failed to load {model_name}: {exc}") from exc
        self.device = device

    def handle(self, request: Request) -> Path:
        if request.kind != KIND_EMBED:
            return write_response(self.exchange, request.job_id, "error",
                                  message=f"clip adapter cannot serve {request.kind}")
        import torch
        from PIL import Image

        image = Image.open(self.exchange / request.payload["image_uri"]).convert("RGB")
        inputs = self.processor(images=image, return_tensors="pt").to(self.device)
        with torch.no_grad():
            embeds = self.model(**inputs).image_embeds[0]
        vector = (embeds / embeds.norm()).cpu().tolist()
        artifact = f"embeddings/{request.job_id}.bin"
        write_embedding(self.exchange / artifact, request.job_id, vector)
        return write_response(self.exchange, request.job_id, "ok", artifact=artifact)
