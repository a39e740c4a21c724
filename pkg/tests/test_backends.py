import json
import threading
import time

import numpy as np
import pytest
from scipy import ndimage

from divergen import backends as be
from divergen.annotation import PointPrompt, corner_prompts
from divergen.orchestrator import (
    ExchangeDir,
    OrchestrationError,
    jobs_from_plan,
    plan_generation_jobs,
    run_jobs,
)
from divergen.prompts import PromptPool


def descriptor(backend_id="synthetic", kind=be.BackendKind.IMAGE_GENERATOR,
               resolution=(64, 64), params=None):
    return be.BackendDescriptor(id=backend_id, kind=kind,
                                resolution=resolution if kind is be.BackendKind.IMAGE_GENERATOR else None,
                                params=params or {})


def pool(category_id=1, prompts=("a photo of a single banana, in a white background",),
         budget=8):
    from divergen.prompts import allocate_generation_budget

    return PromptPool(category_id=category_id, prompts=tuple(prompts),
                      images_per_prompt=tuple(allocate_generation_budget(len(prompts), budget)))


class TestPlanGeneration:
    def test_even_mix_two_backends(self):
        backends = [descriptor("sd-v1.5"), descriptor("if-stage2", resolution=(32, 32))]
        plan = plan_generation_jobs([pool(budget=1000)], backends, seed=1)
        totals = plan.per_backend_totals()
        assert totals == {"if-stage2": 500, "sd-v1.5": 500}

    def test_single_backend_takes_all(self):
        plan = plan_generation_jobs([pool(budget=1000)], [descriptor("solo")], seed=1)
        assert plan.per_backend_totals() == {"solo": 1000}

    def test_remainder_to_lexicographically_smaller(self):
        backends = [descriptor("zeta"), descriptor("alpha")]
        plan = plan_generation_jobs([pool(budget=7)], backends, seed=1)
        assert plan.per_backend_totals() == {"alpha": 4, "zeta": 3}

    def test_seeds_unique_and_deterministic(self):
        backends = [descriptor("a"), descriptor("b")]
        pools = [pool(category_id=1, budget=9), pool(category_id=2, budget=9)]
        plan1 = plan_generation_jobs(pools, backends, seed=77)
        plan2 = plan_generation_jobs(pools, backends, seed=77)
        assert plan1 == plan2
        seeds = [e.seed for e in plan1.entries]
        assert len(set(seeds)) == len(seeds)
        plan3 = plan_generation_jobs(pools, backends, seed=78)
        assert plan3 != plan1

    def test_per_category_totals_match_budgets(self):
        pools = [pool(category_id=1, budget=5), pool(category_id=2, budget=12)]
        plan = plan_generation_jobs(pools, [descriptor("a"), descriptor("b")], seed=0)
        assert plan.per_category_totals() == {1: 5, 2: 12}

    def test_no_generators_error(self):
        with pytest.raises(OrchestrationError):
            plan_generation_jobs([pool()], [], seed=0)

    def test_empty_pools_error(self):
        with pytest.raises(OrchestrationError):
            plan_generation_jobs([], [descriptor()], seed=0)


class TestSyntheticGenerate:
    def test_byte_identical_repeats(self):
        a = be.synthetic_generate("a photo of a single banana", 7, (64, 48))
        b = be.synthetic_generate("a photo of a single banana", 7, (64, 48))
        assert np.array_equal(a, b)

    def test_resolutions_honored(self):
        assert be.synthetic_generate("p", 1, (512, 512)).shape == (512, 512, 3)
        assert be.synthetic_generate("p", 1, (256, 256)).shape == (256, 256, 3)
        assert be.synthetic_generate("p", 1, (64, 128)).shape == (128, 64, 3)

    def test_background_dominates_and_is_near_white(self):
        for seed in range(20):
            image = be.synthetic_generate("a photo of a single acorn", seed, (96, 96))
            background = (image >= be.BACKGROUND_FLOOR).all(axis=2)
            assert background.mean() >= 0.5
            assert image[background].min() >= 240
            foreground = ~background
            assert foreground.any()
            assert (image[foreground].min(axis=1) < 240).all()

    def test_single_connected_foreground(self):
        for seed in range(20):
            image = be.synthetic_generate("a photo of a single dolphin", seed, (80, 80))
            foreground = ~(image >= be.BACKGROUND_FLOOR).all(axis=2)
            _, count = ndimage.label(foreground, structure=np.ones((3, 3)))
            assert count == 1, seed

    def test_truth_mask_matches_image_foreground(self):
        for seed in range(10):
            prompt = "a photo of a single cube"
            image = be.synthetic_generate(prompt, seed, (72, 56))
            truth = be.synthetic_shape_mask(prompt, seed, (72, 56))
            foreground = ~(image >= be.BACKGROUND_FLOOR).all(axis=2)
            assert np.array_equal(foreground, truth.bits)

    def test_same_prompt_same_hue_family(self):
        a = be.synthetic_embed(be.synthetic_generate("banana prompt", 1, (64, 64)))
        b = be.synthetic_embed(be.synthetic_generate("banana prompt", 2, (64, 64)))
        assert float(np.dot(a, b)) >= 0.8


class TestSyntheticPredictMask:
    def test_corner_points_give_background(self):
        image = be.synthetic_generate("a photo of a single hat", 3, (64, 64))
        points = tuple(corner_prompts(64, 64))
        mask, score = be.synthetic_predict_mask(image, points)
        truth = be.synthetic_shape_mask("a photo of a single hat", 3, (64, 64))
        assert np.array_equal(~mask.bits, truth.bits)
        assert score == 1.0

    def test_foreground_point_gives_shape(self):
        prompt = "a photo of a single hat"
        image = be.synthetic_generate(prompt, 3, (64, 64))
        truth = be.synthetic_shape_mask(prompt, 3, (64, 64))
        ys, xs = np.where(truth.bits)
        point = PointPrompt(x=int(xs[0]), y=int(ys[0]))
        mask, _ = be.synthetic_predict_mask(image, (point,))
        assert np.array_equal(mask.bits, truth.bits)


class TestEmbeddingFile:
    def test_file_length_arithmetic(self, tmp_path):
        matrix = be.EmbeddingMatrix(dim=3, ids=(1, 2),
                                    vectors=np.ones((2, 3), dtype=np.float32))
        path = tmp_path / "m.bin"
        be.write_embedding_file(matrix, path)
        assert path.stat().st_size == 16 + 2 * (8 + 3 * 4)

    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        vectors = rng.standard_normal((17, 9)).astype(np.float32)
        matrix = be.EmbeddingMatrix(dim=9, ids=tuple(range(100, 117)), vectors=vectors)
        path = tmp_path / "m.bin"
        be.write_embedding_file(matrix, path)
        loaded = be.read_embedding_file(path)
        assert loaded.ids == matrix.ids
        assert loaded.dim == 9
        assert np.array_equal(loaded.vectors, matrix.vectors)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.bin"
        matrix = be.EmbeddingMatrix(dim=2, ids=(1,), vectors=np.zeros((1, 2), np.float32))
        be.write_embedding_file(matrix, path)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(be.BackendError, match="magic"):
            be.read_embedding_file(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "m.bin"
        matrix = be.EmbeddingMatrix(dim=2, ids=(1, 2), vectors=np.zeros((2, 2), np.float32))
        be.write_embedding_file(matrix, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(be.BackendError, match="bytes"):
            be.read_embedding_file(path)

    def test_non_finite_rejected(self):
        with pytest.raises(be.BackendError):
            be.EmbeddingMatrix(dim=2, ids=(1,),
                               vectors=np.array([[np.nan, 0.0]], dtype=np.float32))


class TestRunJobs:
    def make_plan_jobs(self, n=16):
        backends = [descriptor("synthetic", resolution=(32, 32))]
        plan = plan_generation_jobs([pool(budget=n)], backends, seed=5)
        return jobs_from_plan(plan), backends

    def test_worker_count_does_not_change_results(self, tmp_path):
        jobs, backends = self.make_plan_jobs(64)
        dir1, dir2 = tmp_path / "w1", tmp_path / "w8"
        r1 = run_jobs(jobs, backends, dir1, worker_count=1)
        r8 = run_jobs(jobs, backends, dir2, worker_count=8)
        assert r1 == r8
        for result in r1:
            a = (dir1 / result.artifacts[0]).read_bytes()
            b = (dir2 / result.artifacts[0]).read_bytes()
            assert a == b

    def test_dead_backend_isolated(self, tmp_path):
        jobs, backends = self.make_plan_jobs(8)
        dead = be.BackendJob(job_id=999, backend_id="gone",
                             payload=be.GenerateImage("p", 1, (8, 8)))
        backends = backends + [be.BackendDescriptor(id="gone",
                                                    kind=be.BackendKind.IMAGE_GENERATOR,
                                                    resolution=(8, 8))]
        results = run_jobs(jobs + [dead], backends, tmp_path, worker_count=2, timeout=0.3)
        by_status = {}
        for result in results:
            by_status.setdefault(result.status, []).append(result)
        assert len(by_status["ok"]) == 8
        assert len(by_status["error"]) == 1
        assert "timeout" in by_status["error"][0].message

    def test_unknown_backend_is_per_job_error(self, tmp_path):
        job = be.BackendJob(job_id=1, backend_id="nowhere",
                            payload=be.GenerateImage("p", 1, (8, 8)))
        results = run_jobs([job], [], tmp_path, timeout=0.1)
        assert results[0].status == "error"
        assert "unknown backend" in results[0].message

    def test_kind_mismatch_rejected(self, tmp_path):
        job = be.BackendJob(job_id=1, backend_id="synthetic",
                            payload=be.EmbedImage(image_uri="nope.png"))
        bad = be.BackendDescriptor(id="synthetic", kind=be.BackendKind.IMAGE_GENERATOR,
                                   resolution=(8, 8))
        results = run_jobs([job], [bad], tmp_path, timeout=0.1)
        assert results[0].status == "error"
        assert "kind" in results[0].message

    def test_external_backend_round_trip(self, tmp_path):
        """A thread plays the external backend over the file protocol."""
        exchange = ExchangeDir(tmp_path).ensure()
        job = be.BackendJob(job_id=42, backend_id="ext",
                            payload=be.GenerateImage("p", 9, (8, 8)))
        ext = be.BackendDescriptor(id="ext", kind=be.BackendKind.IMAGE_GENERATOR,
                                   resolution=(8, 8), params={"builtin": "false"})

        def serve():
            request_path = exchange.requests / "42.json"
            for _ in range(200):
                if request_path.exists():
                    request = json.loads(request_path.read_text())
                    assert request["kind"] == "generate_image"
                    artifact = exchange.images / "42.png"
                    from divergen.imageio import save_rgb

                    save_rgb(np.zeros((8, 8, 3), np.uint8), artifact)
                    (exchange.responses / "42.json").write_text(json.dumps(
                        {"job_id": 42, "status": "ok", "artifact": "images/42.png"}))
                    return
                time.sleep(0.01)

        thread = threading.Thread(target=serve)
        thread.start()
        results = run_jobs([job], [ext], tmp_path, timeout=5.0)
        thread.join()
        assert results[0].status == "ok"
        assert results[0].artifacts == ("images/42.png",)

    def test_malformed_response_is_error(self, tmp_path):
        exchange = ExchangeDir(tmp_path).ensure()
        (exchange.responses / "7.json").write_text('{"job_id": 7, "status": "weird"}')
        job = be.BackendJob(job_id=7, backend_id="ext",
                            payload=be.GenerateImage("p", 9, (8, 8)))
        ext = be.BackendDescriptor(id="ext", kind=be.BackendKind.IMAGE_GENERATOR,
                                   resolution=(8, 8), params={"builtin": "no"})
        results = run_jobs([job], [ext], tmp_path, timeout=1.0)
        assert results[0].status == "error"
        assert "malformed" in results[0].message
